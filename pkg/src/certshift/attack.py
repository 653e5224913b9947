"""Projected gradient descent attacks and robust-accuracy evaluation.

The iterate is kept inside the epsilon-ball around the clean input
intersected with the [0, 1] box by projecting every step. The clean input
itself and every PGD iterate are candidates; the attack returns the
candidate with the highest loss, so the returned loss never falls below the
clean loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffnet as dn
from .parallel import map_chunks

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    eps: float = 2 / 255
    steps: int = 20
    step_size: float | None = None  # defaults to 2.5 * eps / steps
    restarts: int = 2
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not np.isfinite(self.eps) or self.eps < 0:
            raise ValueError(f"eps must be finite and >= 0, got {self.eps}")
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("steps must be >= 0 and restarts >= 1")
        if self.steps > 0 and self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0 when steps > 0")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / max(self.steps, 1)


def project(delta: np.ndarray, eps: float, norm: str) -> np.ndarray:
    """Project perturbations (N, ...) onto the eps-ball; feasible points pass through."""
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    if norm == "l2":
        flat = delta.reshape(delta.shape[0], -1)
        norms = np.sqrt((flat * flat).sum(axis=1))
        scale = np.ones_like(norms)
        outside = norms > eps
        scale[outside] = eps / norms[outside]
        return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))
    raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def _random_start(shape, eps: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-eps, eps, size=shape)
    delta = rng.standard_normal(shape)
    flat = delta.reshape(shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    norms[norms == 0] = 1.0
    radii = eps * rng.uniform(0, 1, size=shape[0]) ** (1.0 / flat.shape[1])
    return delta * (radii / norms).reshape((-1,) + (1,) * (len(shape) - 1))


def pgd_batch(
    net: dn.Network,
    xs: np.ndarray,
    ys: Sequence[int] | np.ndarray | None,
    cfg: AttackConfig,
    rng: np.random.Generator,
    loss_specs: Sequence[dn.LossSpec] | None = None,
) -> np.ndarray:
    """Attack a batch of samples jointly; per-sample results are independent.

    `loss_specs` overrides the default per-sample cross-entropy target (used
    by the TRADES inner maximization, which attacks a KL objective).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if loss_specs is None:
        ys = np.asarray(ys)
        if np.any(ys < 0) or np.any(ys >= net.num_classes):
            raise ValueError(f"labels must lie in [0, {net.num_classes})")
        loss_specs = [dn.CrossEntropy(int(y)) for y in ys]
    if len(loss_specs) != xs.shape[0]:
        raise ValueError("one loss spec per sample required")
    if cfg.eps == 0 or (cfg.steps == 0 and not cfg.random_start):
        return xs.copy()

    n = xs.shape[0]
    best_loss = dn.batch_losses(dn.forward_batch(net, xs), loss_specs)
    best_x = xs.copy()
    step = cfg.resolved_step_size()

    def consider(x: np.ndarray, losses: np.ndarray) -> None:
        improved = losses > best_loss
        best_loss[improved] = losses[improved]
        best_x[improved] = x[improved]

    for _ in range(cfg.restarts):
        if cfg.random_start:
            delta = project(_random_start(xs.shape, cfg.eps, cfg.norm, rng), cfg.eps, cfg.norm)
        else:
            delta = np.zeros_like(xs)
        x = np.clip(xs + delta, 0.0, 1.0)
        for _ in range(cfg.steps):
            # the gradient pass already computes the iterate's logits
            grad, logits = dn.grad_input_batch(net, x, loss_specs, return_logits=True)
            consider(x, dn.batch_losses(logits, loss_specs))
            if cfg.norm == "linf":
                x = x + step * np.sign(grad)
            else:
                flat = grad.reshape(n, -1)
                norms = np.sqrt((flat * flat).sum(axis=1))
                norms[norms == 0] = 1.0
                x = x + step * grad / norms.reshape((-1,) + (1,) * (xs.ndim - 1))
            x = np.clip(xs + project(x - xs, cfg.eps, cfg.norm), 0.0, 1.0)
        consider(x, dn.batch_losses(dn.forward_batch(net, x), loss_specs))
    return best_x


def pgd(
    net: dn.Network,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    loss_spec: dn.LossSpec | None = None,
) -> np.ndarray:
    specs = None if loss_spec is None else [loss_spec]
    ys = None if loss_spec is not None else [y]
    return pgd_batch(net, np.asarray(x)[None], ys, cfg, rng, loss_specs=specs)[0]


def clean_accuracy(net: dn.Network, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("empty dataset")
    preds = dn.forward_batch(net, images).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())


def robust_accuracy(
    net: dn.Network,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    seed: int = 0,
    threads: int = 1,
) -> float:
    """Fraction of samples still classified correctly under the attack.

    A sample misclassified on the clean input counts as attacked: the
    unperturbed input is itself an adversarial example inside any ball, so
    robust accuracy can never exceed clean accuracy. Per-chunk RNG
    substreams keyed on sample index make the result independent of the
    thread count.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")

    def attack_chunk(start: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([seed, start]))
        adv = pgd_batch(net, xs, ys, cfg, rng)
        return dn.forward_batch(net, adv).argmax(axis=1) == ys

    clean_ok = dn.forward_batch(net, images).argmax(axis=1) == labels
    adv_ok = np.concatenate(
        map_chunks(attack_chunk, images, labels, chunk=64, threads=threads)
    )
    return float((clean_ok & adv_ok).mean())
