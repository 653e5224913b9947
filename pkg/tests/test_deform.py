import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from certshift import deform as df


def rand_image(seed=0, shape=(3, 8, 8)):
    return np.random.default_rng(seed).random(shape)


# ---------------------------------------------------------------------------
# flow fields


@pytest.mark.parametrize("kind", df.KINDS)
def test_zero_parameters_give_zero_field(kind):
    spec = df.DeformationSpec(kind, np.zeros(df.param_count(kind)))
    f = df.flow_field(spec, 6, 7)
    assert np.array_equal(f.u, np.zeros((6, 7)))
    assert np.array_equal(f.v, np.zeros((6, 7)))


def test_translation_constant_field():
    f = df.flow_field(df.DeformationSpec("translation", [3.0, -1.0]), 5, 4)
    assert np.all(f.u == 3.0)
    assert np.all(f.v == -1.0)


def test_rotation_quarter_turn_hand_values():
    # 3x3 grid, center (1, 1): sampling position for output pixel p is
    # c + R(p - c); corner (0, 0) must sample from (x, y) = (2, 0)
    f = df.flow_field(df.DeformationSpec("rotation", [math.pi / 2]), 3, 3)
    ys, xs = np.meshgrid(np.arange(3.0), np.arange(3.0), indexing="ij")
    sample_x = xs + f.u
    sample_y = ys + f.v
    # hand-evaluated R_{pi/2} about (1,1) for all 9 pixels, (x, y) pairs
    expect = {
        (0, 0): (2, 0), (0, 1): (2, 1), (0, 2): (2, 2),
        (1, 0): (1, 0), (1, 1): (1, 1), (1, 2): (1, 2),
        (2, 0): (0, 0), (2, 1): (0, 1), (2, 2): (0, 2),
    }
    for (i, j), (ex, ey) in expect.items():
        assert sample_x[i, j] == pytest.approx(ex, abs=1e-12)
        assert sample_y[i, j] == pytest.approx(ey, abs=1e-12)


def test_dct_single_dc_coefficient_constant_shift():
    params = np.zeros(8)
    params[0] = 2.0  # a^u_{00}; zero-frequency cosines are 1
    f = df.flow_field(df.DeformationSpec("dct", params), 4, 4)
    np.testing.assert_allclose(f.u, 2.0, rtol=0, atol=1e-15)
    assert np.array_equal(f.v, np.zeros((4, 4)))


def test_dct_all_zero_coefficients_exactly_zero():
    f = df.flow_field(df.DeformationSpec("dct", np.zeros(8)), 5, 5)
    assert np.array_equal(f.u, np.zeros((5, 5)))
    assert np.array_equal(f.v, np.zeros((5, 5)))


def test_nonfinite_params_rejected():
    with pytest.raises(ValueError, match="finite"):
        df.DeformationSpec("rotation", [np.inf])


def test_wrong_param_count_rejected():
    with pytest.raises(ValueError, match="expects 6"):
        df.DeformationSpec("affine", [1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from(["translation", "scaling", "affine", "dct"]),
    st.floats(-3, 3),
    st.integers(0, 10_000),
)
def test_flow_linear_in_parameters(kind, alpha, seed):
    rng = np.random.default_rng(seed)
    params = rng.standard_normal(df.param_count(kind))
    f1 = df.flow_field(df.DeformationSpec(kind, params), 6, 6)
    f2 = df.flow_field(df.DeformationSpec(kind, alpha * params), 6, 6)
    np.testing.assert_allclose(f2.u, alpha * f1.u, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(f2.v, alpha * f1.v, rtol=1e-12, atol=1e-12)


def test_rotation_field_smooth_in_angle():
    # central differences of the field w.r.t. theta match the analytic derivative
    theta, h = 0.3, 1e-6
    up = df.flow_field(df.DeformationSpec("rotation", [theta + h]), 5, 5)
    down = df.flow_field(df.DeformationSpec("rotation", [theta - h]), 5, 5)
    ys, xs = np.meshgrid(np.arange(5.0) - 2, np.arange(5.0) - 2, indexing="ij")
    du_dtheta = -math.sin(theta) * xs - math.cos(theta) * ys
    dv_dtheta = math.cos(theta) * xs - math.sin(theta) * ys
    np.testing.assert_allclose((up.u - down.u) / (2 * h), du_dtheta, atol=1e-6)
    np.testing.assert_allclose((up.v - down.v) / (2 * h), dv_dtheta, atol=1e-6)


# ---------------------------------------------------------------------------
# warping


def test_zero_flow_is_bitwise_identity():
    x = rand_image(1)
    flow = df.FlowField(np.zeros((8, 8)), np.zeros((8, 8)))
    assert np.array_equal(df.warp(x, flow), x)


def test_integer_translation_matches_index_shift():
    x = rand_image(2)
    out = df.apply_deformation(x, df.DeformationSpec("translation", [1.0, 0.0]))
    # output(p) samples input at p + (1, 0): content shifts one column left
    assert np.array_equal(out[:, :, :-1], x[:, :, 1:])
    assert np.all(out[:, :, -1] == 0.0)
    out2 = df.apply_deformation(x, df.DeformationSpec("translation", [0.0, -2.0]))
    assert np.array_equal(out2[:, 2:, :], x[:, :-2, :])
    assert np.all(out2[:, :2, :] == 0.0)


def test_quarter_rotation_of_symmetric_image():
    # build a 4-fold rotationally symmetric image and rotate a quarter turn
    n = 9
    ys, xs = np.meshgrid(np.arange(n) - 4.0, np.arange(n) - 4.0, indexing="ij")
    r = np.sqrt(xs**2 + ys**2)
    img = np.clip(1.0 - r / 6.0, 0, 1)[None]
    out = df.apply_deformation(img, df.DeformationSpec("rotation", [math.pi / 2]))
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], img[:, 1:-1, 1:-1], atol=1e-9)


def test_two_integer_translations_compose_on_interior():
    x = np.zeros((1, 10, 10))
    x[0, 3:7, 3:7] = rand_image(3, (4, 4))
    once = df.apply_deformation(x, df.DeformationSpec("translation", [1.0, 0.0]))
    twice = df.apply_deformation(once, df.DeformationSpec("translation", [1.0, 1.0]))
    direct = df.apply_deformation(x, df.DeformationSpec("translation", [2.0, 1.0]))
    np.testing.assert_allclose(twice[:, 2:8, 2:8], direct[:, 2:8, 2:8], atol=1e-12)


def test_warp_output_stays_in_unit_range():
    x = rand_image(4)
    for kind, params in [
        ("rotation", [0.7]),
        ("scaling", [-0.3]),
        ("affine", [0.1, -0.2, 0.05, 0.1, 1.0, -1.0]),
        ("dct", [1.0, -0.5, 0.2, 0.0, 0.3, 0.0, -0.8, 0.1]),
    ]:
        out = df.apply_deformation(x, df.DeformationSpec(kind, params))
        assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(-2, 2))
def test_warp_linear_in_image_before_clamping(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.random((1, 6, 6))
    y = rng.random((1, 6, 6))
    flow = df.flow_field(df.DeformationSpec("rotation", [0.4]), 6, 6)
    combined = df.warp(a * x + b * y, flow, clamp=False)
    separate = a * df.warp(x, flow, clamp=False) + b * df.warp(y, flow, clamp=False)
    np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-10)


def test_warp_shape_mismatch_raises():
    x = rand_image(5)
    flow = df.FlowField(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError, match="does not match"):
        df.warp(x, flow)


def test_apply_deformation_identity_for_zero_params():
    x = rand_image(6)
    for kind in df.KINDS:
        out = df.apply_deformation(x, df.DeformationSpec(kind, np.zeros(df.param_count(kind))))
        assert np.array_equal(out, x)


# ---------------------------------------------------------------------------
# CLI spec syntax


def test_parse_spec_round_trip():
    spec = df.parse_spec("rotation:0.3")
    assert spec.kind == "rotation" and spec.params[0] == pytest.approx(0.3)
    spec = df.parse_spec("translation:2,-1")
    assert np.array_equal(spec.params, [2.0, -1.0])
    spec = df.parse_spec("dct:")
    assert spec.kind == "dct" and np.array_equal(spec.params, np.zeros(8))


def test_parse_spec_bad_kind():
    with pytest.raises(ValueError, match="unknown deformation kind"):
        df.parse_spec("swirl:1.0")
