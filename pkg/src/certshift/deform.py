"""Parametric image deformations: flow fields and bilinear backward warping.

Coordinates: x runs along columns, y along rows, origin at pixel (0, 0),
image center at ((W-1)/2, (H-1)/2). A flow field stores per-pixel
displacements (u horizontal, v vertical); the warped output at pixel p is
sampled from the input at p + (u, v) (backward warping). Samples falling
outside the canvas contribute zero.

Parameter layouts:
    rotation     (theta,)                  radians, counterclockwise in (x, y)
    translation  (tx, ty)                  pixels
    scaling      (s,)                      displacement s*(p - c); s = 0 is identity
    affine       (a11, a12, a21, a22, b1, b2)
    dct          2*K*K coefficients        u coefficients row-major, then v
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("rotation", "translation", "scaling", "affine", "dct")


def param_count(kind: str, dct_order: int = 2) -> int:
    counts = {"rotation": 1, "translation": 2, "scaling": 1, "affine": 6}
    if kind == "dct":
        return 2 * dct_order * dct_order
    if kind not in counts:
        raise ValueError(f"unknown deformation kind {kind!r} (have {KINDS})")
    return counts[kind]


@dataclass(frozen=True)
class DeformationSpec:
    kind: str
    params: np.ndarray
    dct_order: int = 2

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.params, dtype=np.float64))
        expected = param_count(self.kind, self.dct_order)
        if p.shape != (expected,):
            raise ValueError(
                f"{self.kind} expects {expected} parameters, got shape {p.shape}"
            )
        if not np.all(np.isfinite(p)):
            raise ValueError(f"non-finite deformation parameters: {p}")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray  # horizontal displacement, H x W
    v: np.ndarray  # vertical displacement, H x W

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError(f"flow components must share an HxW shape, got {u.shape}, {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite flow field")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)


def _grid(height: int, width: int):
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return xs - cx, ys - cy


def _dct_basis(order: int, height: int, width: int) -> np.ndarray:
    """(order*order, H, W) separable cosine basis, frequencies k, l < order."""
    i = np.arange(height, dtype=np.float64)
    j = np.arange(width, dtype=np.float64)
    rows = np.stack([np.cos(math.pi * k * (2 * i + 1) / (2 * height)) for k in range(order)])
    cols = np.stack([np.cos(math.pi * l * (2 * j + 1) / (2 * width)) for l in range(order)])
    return (rows[:, None, :, None] * cols[None, :, None, :]).reshape(order * order, height, width)


def flow_field_batch(
    kind: str, params: np.ndarray, height: int, width: int, dct_order: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized flow fields: params (N, P) -> displacement arrays (N, H, W)."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != param_count(kind, dct_order):
        raise ValueError(
            f"expected (N, {param_count(kind, dct_order)}) parameters for {kind}, "
            f"got {params.shape}"
        )
    if not np.all(np.isfinite(params)):
        raise ValueError("non-finite deformation parameters")
    x, y = _grid(height, width)
    if kind == "rotation":
        theta = params[:, 0][:, None, None]
        u = np.cos(theta) * x - np.sin(theta) * y - x
        v = np.sin(theta) * x + np.cos(theta) * y - y
        return u, v
    if kind == "translation":
        n = params.shape[0]
        ones = np.ones((n, height, width))
        return params[:, 0][:, None, None] * ones, params[:, 1][:, None, None] * ones
    if kind == "scaling":
        s = params[:, 0][:, None, None]
        return s * x, s * y
    if kind == "affine":
        a11, a12, a21, a22, b1, b2 = (params[:, i][:, None, None] for i in range(6))
        return a11 * x + a12 * y + b1, a21 * x + a22 * y + b2
    if kind == "dct":
        basis = _dct_basis(dct_order, height, width)
        k2 = dct_order * dct_order
        u = np.tensordot(params[:, :k2], basis, axes=(1, 0))
        v = np.tensordot(params[:, k2:], basis, axes=(1, 0))
        return u, v
    raise ValueError(f"unknown deformation kind {kind!r} (have {KINDS})")


def flow_field(spec: DeformationSpec, height: int, width: int) -> FlowField:
    u, v = flow_field_batch(spec.kind, spec.params[None], height, width, spec.dct_order)
    return FlowField(u[0], v[0])


def warp_batch(
    x: np.ndarray, u: np.ndarray, v: np.ndarray, clamp: bool = True
) -> np.ndarray:
    """Warp one (C, H, W) image under N flow fields -> (N, C, H, W).

    Bilinear sampling at p + (u, v); out-of-canvas corners contribute zero.
    """
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    if u.shape[-2:] != (h, w):
        raise ValueError(f"flow shape {u.shape[-2:]} does not match image {h}x{w}")
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    px = xs[None] + u
    py = ys[None] + v
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    out = np.zeros((u.shape[0], c, h, w))
    for dy_ in (0, 1):
        for dx_ in (0, 1):
            gx = x0 + dx_
            gy = y0 + dy_
            wgt = (fx if dx_ else 1.0 - fx) * (fy if dy_ else 1.0 - fy)
            inside = (gx >= 0) & (gx < w) & (gy >= 0) & (gy < h)
            gxc = np.clip(gx, 0, w - 1).astype(np.intp)
            gyc = np.clip(gy, 0, h - 1).astype(np.intp)
            vals = x[:, gyc, gxc]  # (C, N, H, W)
            out += np.transpose(vals, (1, 0, 2, 3)) * (wgt * inside)[:, None]
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def warp(x: np.ndarray, flow: FlowField, clamp: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {x.shape}")
    if flow.u.shape != x.shape[1:]:
        raise ValueError(f"flow shape {flow.u.shape} does not match image {x.shape[1:]}")
    return warp_batch(x, flow.u[None], flow.v[None], clamp=clamp)[0]


def apply_deformation(x: np.ndarray, spec: DeformationSpec) -> np.ndarray:
    return warp(x, flow_field(spec, x.shape[1], x.shape[2]))


def apply_deformation_batch(
    x: np.ndarray, kind: str, params: np.ndarray, dct_order: int = 2
) -> np.ndarray:
    """One image deformed under N parameter vectors -> (N, C, H, W)."""
    u, v = flow_field_batch(kind, params, x.shape[1], x.shape[2], dct_order)
    return warp_batch(x, u, v)


def parse_spec(text: str, dct_order: int = 2) -> DeformationSpec:
    """Parse the CLI syntax ``kind:phi,...`` e.g. ``rotation:0.3``."""
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    expected = param_count(kind, dct_order)
    if not rest:
        params = np.zeros(expected)
    else:
        try:
            params = np.array([float(tok) for tok in rest.split(",")])
        except ValueError:
            raise ValueError(f"could not parse deformation parameters in {text!r}") from None
    return DeformationSpec(kind, params, dct_order)
