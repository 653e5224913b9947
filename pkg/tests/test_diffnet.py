import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from certshift import diffnet as dn


def make_net(arch="cnn32", shape=(3, 16, 16), classes=4, seed=0):
    return dn.build_network(arch, shape, classes, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# forward


def test_zero_network_gives_zero_logits():
    net = dn.build_network("cnn32", (3, 16, 16), 4, rng=None)
    x = np.random.default_rng(0).random((3, 16, 16))
    assert np.array_equal(dn.forward(net, x), np.zeros(4))


def test_identity_linear_layer_returns_pixels():
    net = dn.build_network("linear", (1, 2, 2), 4, rng=None)
    ident = dn.replace_parameters(net, [np.eye(4), np.zeros(4)])
    x = np.array([[0.1, 0.7], [0.3, 0.9]])[None]
    assert np.array_equal(dn.forward(ident, x), x.ravel())


def naive_forward(net, x):
    """Independent re-implementation with explicit loops."""
    h = x.copy()
    for layer in net.layers:
        if isinstance(layer, dn.Conv2D):
            c_out, c_in, k, _ = layer.weight.shape
            _, hh, ww = h.shape
            pad = layer.pad
            padded = np.zeros((c_in, hh + 2 * pad, ww + 2 * pad))
            padded[:, pad : pad + hh, pad : pad + ww] = h
            out = np.zeros((c_out, hh + 2 * pad - k + 1, ww + 2 * pad - k + 1))
            for co in range(c_out):
                for i in range(out.shape[1]):
                    for j in range(out.shape[2]):
                        acc = layer.bias[co]
                        for ci in range(c_in):
                            for di in range(k):
                                for dj in range(k):
                                    acc += layer.weight[co, ci, di, dj] * padded[ci, i + di, j + dj]
                        out[co, i, j] = acc
            h = out
        elif isinstance(layer, dn.ReLU):
            h = np.where(h > 0, h, 0.0)
        elif isinstance(layer, dn.AvgPool):
            s = layer.size
            c, hh, ww = h.shape
            out = np.zeros((c, hh // s, ww // s))
            for ci in range(c):
                for i in range(hh // s):
                    for j in range(ww // s):
                        out[ci, i, j] = h[ci, i * s : (i + 1) * s, j * s : (j + 1) * s].mean()
            h = out
        elif isinstance(layer, dn.Flatten):
            h = h.ravel()
        elif isinstance(layer, dn.Linear):
            h = layer.weight @ h + layer.bias
    return h


def test_forward_matches_naive_reimplementation():
    net = make_net(seed=3)
    x = np.random.default_rng(4).random((3, 16, 16))
    got = dn.forward(net, x)
    want = naive_forward(net, x)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_forward_bitwise_deterministic():
    net = make_net(seed=1)
    x = np.random.default_rng(2).random((3, 16, 16))
    assert np.array_equal(dn.forward(net, x), dn.forward(net, x))


def test_forward_shape_mismatch_message():
    net = make_net()
    with pytest.raises(dn.ShapeError, match=r"\(3, 16, 16\)"):
        dn.forward(net, np.zeros((3, 8, 8)))


# ---------------------------------------------------------------------------
# losses


def test_uniform_logits_cross_entropy_is_log_c():
    for c in (2, 4, 7):
        logits = np.full(c, 1.3)
        assert dn.loss(logits, dn.CrossEntropy(0)) == pytest.approx(math.log(c), abs=1e-12)


def test_kl_of_identical_logits_is_zero():
    logits = np.array([0.3, -1.2, 2.0])
    assert dn.loss(logits, dn.KLDivergence(logits)) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_two_class_value():
    # ln(1 + e^-2) evaluated at high precision
    import mpmath as mp

    mp.mp.dps = 40
    expected = float(mp.log(1 + mp.e**-2))
    assert dn.loss(np.array([2.0, 0.0]), dn.CrossEntropy(0)) == pytest.approx(expected, abs=1e-14)


def test_target_out_of_range_raises():
    with pytest.raises(ValueError, match="out of range"):
        dn.loss(np.zeros(3), dn.CrossEntropy(3))


def test_kl_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        dn.loss(np.zeros(3), dn.KLDivergence(np.zeros(4)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_sums_to_one(vals):
    s = dn.softmax(np.array(vals))
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s >= 0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-20, 20), min_size=3, max_size=3),
    st.lists(st.floats(-20, 20), min_size=3, max_size=3),
    st.integers(0, 2),
)
def test_losses_nonnegative(logits, ref, target):
    logits = np.array(logits)
    assert dn.loss(logits, dn.CrossEntropy(target)) >= 0.0
    assert dn.loss(logits, dn.KLDivergence(np.array(ref))) >= -1e-12


# ---------------------------------------------------------------------------
# gradients


def test_grad_input_linear_two_class_hand_case():
    # f(x) = W x on a 3-pixel image; dCE/dx = sum_c (softmax_c - onehot_c) W_c
    net = dn.build_network("linear", (1, 1, 3), 2, rng=None)
    W = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])
    net = dn.replace_parameters(net, [W, np.zeros(2)])
    x = np.array([0.2, 0.9, 0.4]).reshape(1, 1, 3)
    logits = W @ x.ravel()
    p = np.exp(logits) / np.exp(logits).sum()
    want = ((p[0] - 1.0) * W[0] + p[1] * W[1]).reshape(1, 1, 3)
    got = dn.grad_input(net, x, dn.CrossEntropy(0))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_grad_through_dead_relu_is_zero():
    net = dn.build_network("cnn32", (3, 16, 16), 4, rng=None)
    # negative conv biases keep every ReLU input strictly negative
    arrays = net.parameter_arrays()
    arrays = [a.copy() for a in arrays]
    arrays[1][:] = -1.0
    arrays[3][:] = -1.0
    dead = dn.replace_parameters(net, arrays)
    g = dn.grad_input(dead, np.random.default_rng(0).random((3, 16, 16)), dn.CrossEntropy(1))
    assert np.array_equal(g, np.zeros_like(g))


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)


def finite_diff_input(net, x, spec, idx, h=1e-5):
    xp = x.copy()
    xp[idx] += h
    xm = x.copy()
    xm[idx] -= h
    return (dn.loss(dn.forward(net, xp), spec) - dn.loss(dn.forward(net, xm), spec)) / (2 * h)


def test_grad_input_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = make_net(seed=5)
    x = rng.random((3, 16, 16))
    spec = dn.CrossEntropy(2)
    g = dn.grad_input(net, x, spec)
    flat = [np.unravel_index(i, x.shape) for i in rng.choice(x.size, 40, replace=False)]
    for idx in flat:
        fd = finite_diff_input(net, x, spec, idx)
        assert relative_error(g[idx], fd) < 1e-4


def test_grad_params_empty_batch_raises():
    with pytest.raises(ValueError, match="empty batch"):
        dn.grad_params(make_net(), [])


def test_grad_params_single_sample_equals_itself():
    net = make_net(seed=7)
    x = np.random.default_rng(8).random((3, 16, 16))
    spec = dn.CrossEntropy(0)
    single = dn.grad_params(net, [(x, spec)])
    again = dn.grad_params(net, [(x, spec)])
    for a, b in zip(single, again):
        assert np.array_equal(a, b)


def test_grad_params_two_samples_exact_mean():
    # exact arithmetic mean of the two single-sample gradients; the batched
    # BLAS path may differ from the separate path by a few ulps, nothing more
    net = make_net(seed=9)
    rng = np.random.default_rng(10)
    x1, x2 = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    s1, s2 = dn.CrossEntropy(0), dn.CrossEntropy(3)
    g1 = dn.grad_params(net, [(x1, s1)])
    g2 = dn.grad_params(net, [(x2, s2)])
    both = dn.grad_params(net, [(x1, s1), (x2, s2)])
    for a, b, c in zip(g1, g2, both):
        np.testing.assert_allclose((a + b) / 2.0, c, rtol=1e-12, atol=1e-14)


def test_grad_params_kl_matches_finite_differences():
    net = make_net(seed=13)
    rng = np.random.default_rng(14)
    x = rng.random((3, 16, 16))
    spec = dn.KLDivergence(np.array([0.5, -0.2, 1.0, 0.1]))
    grads = dn.grad_params(net, [(x, spec)])
    params = net.parameter_arrays()
    h = 1e-5
    for ai in range(len(params)):
        for flat_i in rng.choice(params[ai].size, min(5, params[ai].size), replace=False):
            arrs = [p.copy() for p in params]
            arrs[ai].ravel()[flat_i] += h
            up = dn.loss(dn.forward(dn.replace_parameters(net, arrs), x), spec)
            arrs = [p.copy() for p in params]
            arrs[ai].ravel()[flat_i] -= h
            down = dn.loss(dn.forward(dn.replace_parameters(net, arrs), x), spec)
            fd = (up - down) / (2 * h)
            assert relative_error(grads[ai].ravel()[flat_i], fd) < 1e-4


# ---------------------------------------------------------------------------
# sgd


def test_sgd_zero_learning_rate_is_identity():
    net = make_net(seed=1)
    grads = [np.ones_like(p) for p in net.parameter_arrays()]
    stepped = dn.sgd_step(net, grads, 0.0)
    for a, b in zip(net.parameter_arrays(), stepped.parameter_arrays()):
        assert np.array_equal(a, b)


def test_sgd_scalar_arithmetic():
    net = dn.build_network("linear", (1, 1, 1), 1, rng=None)
    net = dn.replace_parameters(net, [np.array([[1.0]]), np.array([0.0])])
    stepped = dn.sgd_step(net, [np.array([[2.0]]), np.array([0.0])], 0.1)
    assert stepped.parameter_arrays()[0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_full_net_delta():
    net = make_net(seed=2)
    rng = np.random.default_rng(3)
    grads = [rng.standard_normal(p.shape) for p in net.parameter_arrays()]
    stepped = dn.sgd_step(net, grads, 0.01)
    for p, g, q in zip(net.parameter_arrays(), grads, stepped.parameter_arrays()):
        assert np.array_equal(q, p - 0.01 * g)


def test_sgd_nonfinite_gradient_names_layer():
    net = make_net(seed=2)
    grads = [np.zeros_like(p) for p in net.parameter_arrays()]
    grads[2][0] = np.nan
    with pytest.raises(ValueError, match="array 2"):
        dn.sgd_step(net, grads, 0.1)


def test_network_parameters_read_only():
    net = make_net()
    with pytest.raises(ValueError):
        net.layers[0].weight[0, 0, 0, 0] = 1.0


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    net = make_net(seed=21)
    path = tmp_path / "model.ckpt"
    dn.save_checkpoint(net, path, seed=21, epoch=3, metrics={"val_acc": 0.5})
    loaded, header = dn.load_checkpoint(path)
    assert header["epoch"] == 3
    assert loaded.arch == net.arch
    for a, b in zip(net.parameter_arrays(), loaded.parameter_arrays()):
        assert np.array_equal(a, b)


def test_checkpoint_truncated_blob_raises(tmp_path):
    net = make_net(seed=22)
    path = tmp_path / "model.ckpt"
    dn.save_checkpoint(net, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError, match="expected"):
        dn.load_checkpoint(path)


def test_checkpoint_bad_magic_raises(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOT-A-CKPT\n{}\n")
    with pytest.raises(ValueError, match="magic"):
        dn.load_checkpoint(path)


def test_parameter_count_pure_function_of_descriptor():
    a = make_net(seed=1)
    b = make_net(seed=99)
    assert a.arch == b.arch
    assert a.parameter_count() == b.parameter_count()
    rebuilt = dn.network_from_descriptor(a.arch)
    assert rebuilt.parameter_count() == a.parameter_count()
