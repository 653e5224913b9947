"""Small differentiable classifiers with hand-written forward and backward passes.

Everything is float64 numpy. Images are (C, H, W) arrays; batches add a
leading N axis. Networks are immutable: parameter arrays are marked
read-only at construction and `sgd_step` returns a new network.

Checkpoint files start with the magic line ``CSHIFT-CKPT-1``, followed by a
one-line JSON header (architecture descriptor, seed, epoch, metrics,
parameter count) and the raw little-endian float64 parameter blob, arrays
concatenated in layer order, C order within each array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "CSHIFT-CKPT-1"


class ShapeError(ValueError):
    """Input does not match the shape the network expects."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Conv2D:
    """3x3-style convolution, stride 1, zero padding `pad`."""

    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)
    pad: int

    def __post_init__(self):
        object.__setattr__(self, "weight", _freeze(self.weight))
        object.__setattr__(self, "bias", _freeze(self.bias))


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)

    def __post_init__(self):
        object.__setattr__(self, "weight", _freeze(self.weight))
        object.__setattr__(self, "bias", _freeze(self.bias))


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Conv2D | Linear | ReLU | AvgPool | Flatten


@dataclass(frozen=True)
class Network:
    """Immutable layer stack. `arch` fully determines every parameter shape."""

    arch: str
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if isinstance(layer, (Conv2D, Linear)):
                out.append(layer.weight)
                out.append(layer.bias)
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameter_arrays())


# ---------------------------------------------------------------------------
# loss specs


@dataclass(frozen=True)
class CrossEntropy:
    target: int


@dataclass(frozen=True)
class KLDivergence:
    reference_logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "reference_logits", _freeze(np.asarray(self.reference_logits))
        )


LossSpec = CrossEntropy | KLDivergence


# ---------------------------------------------------------------------------
# architecture registry

# Default desk-scale backbone for 32x32 inputs plus a pure linear model used
# as an analytic oracle in attack/certification tests.


def _plan_cnn32(c: int, h: int, w: int, classes: int):
    if h % 4 or w % 4:
        raise ShapeError(f"cnn32 needs H, W divisible by 4, got {h}x{w}")
    feat = 16 * (h // 4) * (w // 4)
    return [
        ("conv", c, 8, 3, 1),
        ("relu",),
        ("pool", 2),
        ("conv", 8, 16, 3, 1),
        ("relu",),
        ("pool", 2),
        ("flatten",),
        ("linear", feat, classes),
    ]


def _plan_linear(c: int, h: int, w: int, classes: int):
    return [("flatten",), ("linear", c * h * w, classes)]


ARCHITECTURES = {
    "cnn32": _plan_cnn32,
    "linear": _plan_linear,
}


def descriptor(name: str, input_shape: tuple[int, int, int], classes: int) -> str:
    c, h, w = input_shape
    return f"{name}:{c}x{h}x{w}:{classes}"


def parse_descriptor(desc: str) -> tuple[str, tuple[int, int, int], int]:
    try:
        name, shape, classes = desc.split(":")
        c, h, w = (int(v) for v in shape.split("x"))
        return name, (c, h, w), int(classes)
    except ValueError:
        raise ValueError(f"malformed architecture descriptor {desc!r}") from None


def _materialize(plan, rng: np.random.Generator | None) -> tuple[Layer, ...]:
    layers: list[Layer] = []
    for item in plan:
        kind = item[0]
        if kind == "conv":
            _, c_in, c_out, k, pad = item
            fan_in = c_in * k * k
            bound = math.sqrt(6.0 / fan_in)
            if rng is None:
                weight = np.zeros((c_out, c_in, k, k))
            else:
                weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
            layers.append(Conv2D(weight, np.zeros(c_out), pad))
        elif kind == "linear":
            _, n_in, n_out = item
            bound = math.sqrt(6.0 / n_in)
            if rng is None:
                weight = np.zeros((n_out, n_in))
            else:
                weight = rng.uniform(-bound, bound, size=(n_out, n_in))
            layers.append(Linear(weight, np.zeros(n_out)))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "pool":
            layers.append(AvgPool(item[1]))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer plan entry {item!r}")
    return tuple(layers)


def build_network(
    name: str,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    classes: int = 4,
    rng: np.random.Generator | None = None,
) -> Network:
    """Build a named architecture. `rng=None` gives all-zero parameters;
    otherwise Kaiming-uniform fan-in weights are drawn from `rng`."""
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r} (have {sorted(ARCHITECTURES)})")
    c, h, w = input_shape
    plan = ARCHITECTURES[name](c, h, w, classes)
    return Network(
        arch=descriptor(name, input_shape, classes),
        layers=_materialize(plan, rng),
        input_shape=(c, h, w),
        num_classes=classes,
    )


def network_from_descriptor(desc: str) -> Network:
    name, shape, classes = parse_descriptor(desc)
    return build_network(name, shape, classes, rng=None)


def replace_parameters(net: Network, arrays: Sequence[np.ndarray]) -> Network:
    """New network with the same topology and the given parameter arrays."""
    arrays = list(arrays)
    layers: list[Layer] = []
    i = 0
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            w, b = arrays[i], arrays[i + 1]
            i += 2
            layers.append(Conv2D(w.reshape(layer.weight.shape), b.reshape(layer.bias.shape), layer.pad))
        elif isinstance(layer, Linear):
            w, b = arrays[i], arrays[i + 1]
            i += 2
            layers.append(Linear(w.reshape(layer.weight.shape), b.reshape(layer.bias.shape)))
        else:
            layers.append(layer)
    if i != len(arrays):
        raise ValueError(f"expected {i} parameter arrays, got {len(arrays)}")
    return Network(net.arch, tuple(layers), net.input_shape, net.num_classes)


# ---------------------------------------------------------------------------
# im2col plumbing

_COL_INDEX_CACHE: dict[tuple[int, int, int, int, int], tuple[np.ndarray, int, int]] = {}


def _col_indices(c_in: int, h: int, w: int, k: int, pad: int):
    """Gather indices (out_positions, c_in*k*k) into the zero-padded image."""
    key = (c_in, h, w, k, pad)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    out_h, out_w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    i0 = np.repeat(np.arange(k), k)
    i0 = np.tile(i0, c_in)
    i1 = np.repeat(np.arange(out_h), out_w)
    j0 = np.tile(np.arange(k), k * c_in)
    j1 = np.tile(np.arange(out_w), out_h)
    rows = i1[:, None] + i0[None, :]
    cols = j1[:, None] + j0[None, :]
    chan = np.repeat(np.arange(c_in), k * k)[None, :]
    flat = chan * (h + 2 * pad) * (w + 2 * pad) + rows * (w + 2 * pad) + cols
    _COL_INDEX_CACHE[key] = (flat, int(out_h), int(out_w))
    return _COL_INDEX_CACHE[key]


def _im2col(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N, out_h*out_w, C*k*k) patches."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    flat, out_h, out_w = _col_indices(c, h, w, k, pad)
    cols = np.take(xp.reshape(n, -1), flat.ravel(), axis=1)
    return cols.reshape(n, flat.shape[0], flat.shape[1]), out_h, out_w


def _conv_forward_cols(x: np.ndarray, weight: np.ndarray, bias, pad: int, keep_cols: bool):
    n = x.shape[0]
    c_out, _, k, _ = weight.shape
    cols, out_h, out_w = _im2col(x, k, pad)
    flat = cols.reshape(n * out_h * out_w, -1) @ weight.reshape(c_out, -1).T
    if bias is not None:
        flat += bias
    out = flat.reshape(n, out_h * out_w, c_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out).reshape(n, c_out, out_h, out_w)
    return out, (cols if keep_cols else None)


def _conv_forward_shift(x: np.ndarray, weight: np.ndarray, bias, pad: int):
    """Shift-accumulate form: cheaper than patch extraction for large batches."""
    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    out_h, out_w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((n, c_out, out_h, out_w))
    if bias is not None:
        out += bias[None, :, None, None]
    for di in range(k):
        for dj in range(k):
            window = xp[:, :, di : di + out_h, dj : dj + out_w]
            out += np.einsum("nchw,oc->nohw", window, weight[:, :, di, dj], optimize=True)
    return out


_SHIFT_BATCH_THRESHOLD = 128


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias, pad: int, keep_cols: bool):
    """Convolution, stride 1. The algorithm switches on batch size; chunk
    boundaries are fixed by the callers, so results stay reproducible."""
    if not keep_cols and x.shape[0] >= _SHIFT_BATCH_THRESHOLD:
        return _conv_forward_shift(x, weight, bias, pad), None
    return _conv_forward_cols(x, weight, bias, pad, keep_cols)


def _conv_backward_input(dy: np.ndarray, weight: np.ndarray, pad: int) -> np.ndarray:
    """dL/dx, stride 1. Wide outputs go through one GEMM plus nine shifted
    accumulations; small ones through a convolution with the flipped kernel."""
    n, c_out, out_h, out_w = dy.shape
    _, c_in, k, _ = weight.shape
    if out_h * out_w < 64:
        flipped = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx, _ = _conv_forward_cols(dy, flipped, None, k - 1 - pad, False)
        return dx
    dy_flat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    dcols = dy_flat @ weight.reshape(c_out, -1)  # (N*L, c_in*k*k)
    dcols = dcols.reshape(n, out_h, out_w, c_in, k, k)
    h, w = out_h - 2 * pad + k - 1, out_w - 2 * pad + k - 1
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad))
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di : di + out_h, dj : dj + out_w] += dcols[:, :, :, :, di, dj].transpose(
                0, 3, 1, 2
            )
    return dxp[:, :, pad : pad + h, pad : pad + w]


# ---------------------------------------------------------------------------
# forward / backward


def _layer_forward(layer: Layer, x: np.ndarray, keep_cols: bool = False):
    if isinstance(layer, Conv2D):
        c_in = layer.weight.shape[1]
        if x.shape[1] != c_in:
            raise ShapeError(f"conv expects {c_in} channels, got {x.shape[1]}")
        out, cols = _conv_forward(x, layer.weight, layer.bias, layer.pad, keep_cols)
        return out, (x.shape, cols)
    if isinstance(layer, Linear):
        if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(
                f"linear expects flat input of width {layer.weight.shape[1]}, "
                f"got shape {x.shape[1:]}"
            )
        return x @ layer.weight.T + layer.bias, x
    if isinstance(layer, ReLU):
        mask = x > 0  # subgradient at 0 is 0
        return x * mask, mask
    if isinstance(layer, AvgPool):
        n, c, h, w = x.shape
        s = layer.size
        if h % s or w % s:
            raise ShapeError(f"pool size {s} does not divide {h}x{w}")
        r = x.reshape(n, c, h // s, s, w // s, s)
        return r.mean(axis=(3, 5)), (x.shape, s)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    raise TypeError(f"unknown layer {layer!r}")


def _layer_backward(layer: Layer, dy: np.ndarray, cache, need_param_grads: bool = False):
    if isinstance(layer, Conv2D):
        x_shape, cols = cache
        n = x_shape[0]
        c_out = layer.weight.shape[0]
        dx = _conv_backward_input(dy, layer.weight, layer.pad)
        if not need_param_grads:
            return dx, None
        dy2 = dy.reshape(n, c_out, -1)
        # sum over samples and positions in one GEMM
        dyt = np.ascontiguousarray(dy2.transpose(1, 0, 2)).reshape(c_out, -1)
        dw_sum = dyt @ cols.reshape(-1, cols.shape[2])
        db_sum = dy2.sum(axis=(0, 2))
        return dx, (dw_sum.reshape(layer.weight.shape), db_sum)
    if isinstance(layer, Linear):
        x = cache
        dx = dy @ layer.weight
        if not need_param_grads:
            return dx, None
        return dx, (dy.T @ x, dy.sum(axis=0))
    if isinstance(layer, ReLU):
        return dy * cache, None
    if isinstance(layer, AvgPool):
        x_shape, s = cache
        up = np.repeat(np.repeat(dy, s, axis=2), s, axis=3)
        return up / (s * s), None
    if isinstance(layer, Flatten):
        return dy.reshape(cache), None
    raise TypeError(f"unknown layer {layer!r}")


def _check_input(net: Network, x: np.ndarray):
    if x.shape[-3:] != net.input_shape:
        raise ShapeError(
            f"network {net.arch} expects input shape {net.input_shape}, got {x.shape[-3:]}"
        )


def forward_batch(net: Network, xs: np.ndarray) -> np.ndarray:
    """Logits for a (N, C, H, W) batch."""
    _check_input(net, xs)
    h = np.asarray(xs, dtype=np.float64)
    for layer in net.layers:
        h, _ = _layer_forward(layer, h)
    return h


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits for a single (C, H, W) image."""
    return forward_batch(net, np.asarray(x)[None])[0]


def features_batch(net: Network, xs: np.ndarray) -> np.ndarray:
    """Penultimate activations: everything up to the final linear layer."""
    _check_input(net, xs)
    h = np.asarray(xs, dtype=np.float64)
    for layer in net.layers[:-1]:
        h, _ = _layer_forward(layer, h)
    return h.reshape(h.shape[0], -1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, spec: LossSpec) -> float:
    """Cross-entropy or KL divergence of a single logits vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if isinstance(spec, CrossEntropy):
        if not 0 <= spec.target < logits.shape[-1]:
            raise ValueError(
                f"target class {spec.target} out of range for {logits.shape[-1]} logits"
            )
        return float(-log_softmax(logits)[spec.target])
    if isinstance(spec, KLDivergence):
        ref = spec.reference_logits
        if ref.shape != logits.shape:
            raise ValueError(f"KL reference shape {ref.shape} != logits shape {logits.shape}")
        p = softmax(ref)
        return float(np.sum(p * (log_softmax(ref) - log_softmax(logits))))
    raise TypeError(f"unknown loss spec {spec!r}")


def _loss_grad_wrt_logits(logits: np.ndarray, specs: Sequence[LossSpec]) -> np.ndarray:
    """d(loss_i)/d(logits_i) stacked over the batch."""
    grads = np.empty_like(logits)
    probs = softmax(logits)
    for i, spec in enumerate(specs):
        if isinstance(spec, CrossEntropy):
            if not 0 <= spec.target < logits.shape[1]:
                raise ValueError(
                    f"target class {spec.target} out of range for {logits.shape[1]} logits"
                )
            g = probs[i].copy()
            g[spec.target] -= 1.0
            grads[i] = g
        elif isinstance(spec, KLDivergence):
            p = softmax(spec.reference_logits)
            grads[i] = probs[i] - p
        else:
            raise TypeError(f"unknown loss spec {spec!r}")
    return grads


def _forward_with_caches(net: Network, xs: np.ndarray, keep_cols: bool = False):
    h = np.asarray(xs, dtype=np.float64)
    caches = []
    for layer in net.layers:
        h, cache = _layer_forward(layer, h, keep_cols)
        caches.append(cache)
    return h, caches


def batch_losses(logits: np.ndarray, specs: Sequence[LossSpec]) -> np.ndarray:
    """Vectorized per-sample losses for a (N, C) logits batch."""
    logits = np.asarray(logits, dtype=np.float64)
    out = np.empty(logits.shape[0])
    log_q = log_softmax(logits)
    for i, spec in enumerate(specs):
        if isinstance(spec, CrossEntropy):
            if not 0 <= spec.target < logits.shape[1]:
                raise ValueError(
                    f"target class {spec.target} out of range for {logits.shape[1]} logits"
                )
            out[i] = -log_q[i, spec.target]
        elif isinstance(spec, KLDivergence):
            p = softmax(spec.reference_logits)
            out[i] = np.sum(p * (log_softmax(spec.reference_logits) - log_q[i]))
        else:
            raise TypeError(f"unknown loss spec {spec!r}")
    return out


def grad_input_batch(
    net: Network,
    xs: np.ndarray,
    specs: Sequence[LossSpec],
    return_logits: bool = False,
):
    """Per-sample gradient of loss(forward(net, x_i), spec_i) w.r.t. x_i."""
    _check_input(net, xs)
    if len(specs) != xs.shape[0]:
        raise ValueError("one loss spec per sample required")
    logits, caches = _forward_with_caches(net, xs)
    dy = _loss_grad_wrt_logits(logits, specs)
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        dy, _ = _layer_backward(layer, dy, cache)
    if return_logits:
        return dy, logits
    return dy


def grad_input(net: Network, x: np.ndarray, spec: LossSpec) -> np.ndarray:
    return grad_input_batch(net, np.asarray(x)[None], [spec])[0]


def grad_params_weighted(
    net: Network,
    xs: np.ndarray,
    specs: Sequence[LossSpec],
    weights: Sequence[float],
) -> list[np.ndarray]:
    """Gradient of sum_i weights_i * loss(forward(net, x_i), spec_i) w.r.t.
    the parameters, in `parameter_arrays` order. One forward/backward pass;
    the per-sample weights scale the loss gradients before the reduction."""
    if xs.shape[0] == 0:
        raise ValueError("empty batch")
    if len(specs) != xs.shape[0] or len(weights) != xs.shape[0]:
        raise ValueError("one loss spec and weight per sample required")
    _check_input(net, xs)
    logits, caches = _forward_with_caches(net, xs, keep_cols=True)
    dy = _loss_grad_wrt_logits(logits, specs)
    dy *= np.asarray(weights, dtype=np.float64)[:, None]
    per_layer: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        dy, grads = _layer_backward(net.layers[idx], dy, caches[idx], need_param_grads=True)
        per_layer[idx] = grads
    return [arr for grads in per_layer if grads is not None for arr in grads]


def grad_params(
    net: Network, batch: Sequence[tuple[np.ndarray, LossSpec]]
) -> list[np.ndarray]:
    """Mean over the batch of per-sample parameter gradients.

    Returns arrays in the same order as `Network.parameter_arrays`. The
    reduction over samples happens inside a fixed-order GEMM, so the result
    matches the arithmetic mean of single-sample gradients to machine
    precision (a few ulps of BLAS reduction-order noise, nothing more).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    specs = [spec for _, spec in batch]
    n = len(batch)
    return grad_params_weighted(net, xs, specs, [1.0 / n] * n)


def sgd_step(net: Network, grads: Sequence[np.ndarray], learning_rate: float) -> Network:
    """theta <- theta - lr * g, elementwise; returns a new network."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    params = net.parameter_arrays()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter array {i}")
        updated.append(p - learning_rate * g)
    return replace_parameters(net, updated)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    net: Network,
    path,
    seed: int = 0,
    epoch: int = 0,
    metrics: dict | None = None,
) -> None:
    params = net.parameter_arrays()
    header = {
        "arch": net.arch,
        "seed": int(seed),
        "epoch": int(epoch),
        "metrics": metrics or {},
        "param_count": int(sum(a.size for a in params)),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC.encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in params:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Network, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC.encode():
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        header = json.loads(fh.readline())
        blob = fh.read()
    skeleton = network_from_descriptor(header["arch"])
    expected = skeleton.parameter_count()
    if header.get("param_count") != expected:
        raise ValueError(
            f"checkpoint header param_count {header.get('param_count')} does not match "
            f"architecture {header['arch']} ({expected})"
        )
    if len(blob) != expected * 8:
        raise ValueError(
            f"checkpoint blob holds {len(blob) // 8} values, expected {expected}"
        )
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    arrays = []
    offset = 0
    for a in skeleton.parameter_arrays():
        arrays.append(flat[offset : offset + a.size].reshape(a.shape))
        offset += a.size
    return replace_parameters(skeleton, arrays), header
