"""Training loops: plain risk minimization, PGD adversarial augmentation, and
TRADES, plus deformation augmentation and source-validation model selection.

All loops are single-threaded plain SGD with a constant learning rate and a
per-run RNG derived from the config seed, so a (benchmark, arch, config)
triple reproduces final parameters bit for bit. Only source-domain samples
are ever touched; validation accuracy comes from the benchmark's fixed
source split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import attack as atk, datagen as dg, deform, diffnet as dn

METHODS = ("erm", "pgd_aug", "trades")
AUGMENT_KINDS = ("gaussian_noise",) + deform.KINDS


@dataclass(frozen=True)
class AugmentationConfig:
    """Per-sample input perturbation applied before the method loss.

    `gaussian_noise` adds pixel noise of scale sigma; deformation kinds warp
    with parameters drawn from N(0, sigma^2 I).
    """

    kind: str
    sigma: float
    dct_order: int = 2

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"augmentation kind must be one of {AUGMENT_KINDS}")
        if self.sigma < 0:
            raise ValueError("augmentation sigma must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    lam: float = 0.5  # clean/adversarial mix for pgd_aug
    beta: float = 3.0  # consistency weight for trades
    attack: atk.AttackConfig = field(
        default_factory=lambda: atk.AttackConfig(steps=5, restarts=1)
    )
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    augmentation: AugmentationConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size must be >= 1 and learning_rate > 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass(frozen=True)
class TrainResult:
    network: dn.Network  # final-epoch parameters
    log: tuple[EpochRecord, ...]
    checkpoints: tuple[dn.Network, ...]  # one per epoch, index = epoch


def _augment(xs: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    if aug.sigma == 0:
        return xs
    if aug.kind == "gaussian_noise":
        return xs + aug.sigma * rng.standard_normal(xs.shape)
    dim = deform.param_count(aug.kind, aug.dct_order)
    out = np.empty_like(xs)
    params = aug.sigma * rng.standard_normal((xs.shape[0], dim))
    for i in range(xs.shape[0]):
        u, v = deform.flow_field_batch(aug.kind, params[i : i + 1], xs.shape[2], xs.shape[3], aug.dct_order)
        out[i] = deform.warp_batch(xs[i], u, v)[0]
    return out


def _batch_step(
    net: dn.Network,
    xb: np.ndarray,
    yb: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[dn.Network, float]:
    ce = [dn.CrossEntropy(int(y)) for y in yb]
    logits = dn.forward_batch(net, xb)
    clean_loss = float(dn.batch_losses(logits, ce).mean())
    n = len(ce)

    if cfg.method == "erm":
        grads = dn.grad_params_weighted(net, xb, ce, [1.0 / n] * n)
        total_loss = clean_loss
    elif cfg.method == "pgd_aug":
        adv = atk.pgd_batch(net, xb, yb, cfg.attack, rng)
        adv_loss = float(dn.batch_losses(dn.forward_batch(net, adv), ce).mean())
        # one weighted pass over clean and adversarial halves
        grads = dn.grad_params_weighted(
            net,
            np.concatenate([xb, adv]),
            ce + ce,
            [cfg.lam / n] * n + [(1.0 - cfg.lam) / n] * n,
        )
        total_loss = cfg.lam * clean_loss + (1.0 - cfg.lam) * adv_loss
    else:  # trades: clean CE plus beta * max KL(f(x) || f(x + delta))
        kl_specs = [dn.KLDivergence(logits[i]) for i in range(n)]
        adv = atk.pgd_batch(net, xb, None, cfg.attack, rng, loss_specs=kl_specs)
        kl_loss = float(dn.batch_losses(dn.forward_batch(net, adv), kl_specs).mean())
        grads = dn.grad_params_weighted(
            net,
            np.concatenate([xb, adv]),
            ce + kl_specs,
            [1.0 / n] * n + [cfg.beta / n] * n,
        )
        total_loss = clean_loss + cfg.beta * kl_loss

    return dn.sgd_step(net, grads, cfg.learning_rate), total_loss


def trades_batch_loss(net: dn.Network, xb: np.ndarray, yb: np.ndarray, cfg: TrainConfig,
                      rng: np.random.Generator) -> float:
    """Evaluate the TRADES objective on a batch without updating parameters."""
    ce = [dn.CrossEntropy(int(y)) for y in yb]
    logits = dn.forward_batch(net, xb)
    clean = float(dn.batch_losses(logits, ce).mean())
    kl_specs = [dn.KLDivergence(logits[i]) for i in range(len(ce))]
    adv = atk.pgd_batch(net, xb, None, cfg.attack, rng, loss_specs=kl_specs)
    kl = float(dn.batch_losses(dn.forward_batch(net, adv), kl_specs).mean())
    return clean + cfg.beta * kl


def erm_batch_loss(net: dn.Network, xb: np.ndarray, yb: np.ndarray) -> float:
    logits = dn.forward_batch(net, xb)
    return float(dn.batch_losses(logits, [dn.CrossEntropy(int(y)) for y in yb]).mean())


def train(benchmark: dg.DGBenchmark, arch: str, cfg: TrainConfig) -> TrainResult:
    """Train on the source-train split; log per-epoch loss and source-val accuracy."""
    x_train, y_train = dg.source_arrays(benchmark, "train")
    x_val, y_val = dg.source_arrays(benchmark, "val")
    c = x_train.shape[1]
    size = benchmark.image_size
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 77]))
    net = dn.build_network(arch, (c, size, size), benchmark.class_count, rng)

    log: list[EpochRecord] = []
    checkpoints: list[dn.Network] = []
    m = len(y_train)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(m)
        losses = []
        for start in range(0, m, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if cfg.augmentation is not None:
                xb = _augment(xb, cfg.augmentation, rng)
            net, batch_loss = _batch_step(net, xb, yb, cfg, rng)
            losses.append(batch_loss)
        val_acc = atk.clean_accuracy(net, x_val, y_val)
        log.append(EpochRecord(epoch, float(np.mean(losses)), val_acc))
        checkpoints.append(net)
    return TrainResult(net, tuple(log), tuple(checkpoints))


def select_model(log: Sequence[EpochRecord], checkpoints: Sequence[dn.Network]) -> dn.Network:
    """Checkpoint with the best source-validation accuracy; earliest epoch wins ties."""
    if len(log) == 0 or len(checkpoints) == 0:
        raise ValueError("no checkpoints to select from")
    if len(log) != len(checkpoints):
        raise ValueError("log and checkpoint lists must align")
    best = 0
    for i, rec in enumerate(log):
        if rec.val_acc > log[best].val_acc:
            best = i
    return checkpoints[best]


def write_log_csv(path, log: Sequence[EpochRecord]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_acc"])
        for rec in log:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_acc)])


# ---------------------------------------------------------------------------
# deformation-invariance study


def _deform_eval_set(
    images: np.ndarray, kind: str, eps: float, seed: int, dct_order: int = 2
) -> np.ndarray:
    """Images perturbed at parameter magnitude eps, direction per-sample random."""
    if eps == 0:
        return images
    rng = np.random.default_rng(np.random.SeedSequence([seed, 911]))
    n = images.shape[0]
    if kind == "gaussian_noise":
        return images + eps * rng.standard_normal(images.shape)
    dim = deform.param_count(kind, dct_order)
    if dim == 1:
        params = eps * np.where(rng.uniform(size=(n, 1)) < 0.5, -1.0, 1.0)
    else:
        direction = rng.standard_normal((n, dim))
        direction /= np.sqrt((direction**2).sum(axis=1, keepdims=True))
        params = eps * direction
    out = np.empty_like(images)
    for i in range(n):
        u, v = deform.flow_field_batch(kind, params[i : i + 1], images.shape[2], images.shape[3], dct_order)
        out[i] = deform.warp_batch(images[i], u, v)[0]
    return out


@dataclass(frozen=True)
class InvarianceRow:
    kind: str
    eps: float
    augmented: bool
    split: str
    accuracy: float


def invariance_table(
    benchmark: dg.DGBenchmark,
    base_net: dn.Network,
    augmented_nets: Mapping[str, dn.Network],
    eps_grid: Sequence[float],
    seed: int = 0,
) -> list[InvarianceRow]:
    """Accuracy on eps-magnitude perturbed images, with and without matching
    augmentation at train time, on source-val and target splits."""
    if base_net is None:
        raise ValueError("missing unaugmented base model")
    x_val, y_val = dg.source_arrays(benchmark, "val")
    splits = {"source": (x_val, y_val), "target": (benchmark.target.images, benchmark.target.labels)}
    rows = []
    for kind, aug_net in augmented_nets.items():
        if aug_net is None:
            raise ValueError(f"missing augmented model for kind {kind!r}")
        for eps in eps_grid:
            for split, (xs, ys) in splits.items():
                perturbed = _deform_eval_set(xs, kind, float(eps), seed)
                for augmented, net in ((False, base_net), (True, aug_net)):
                    preds = dn.forward_batch(net, perturbed).argmax(axis=1)
                    rows.append(
                        InvarianceRow(kind, float(eps), augmented, split, float((preds == ys).mean()))
                    )
    return rows


def write_invariance_csv(path, rows: Sequence[InvarianceRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "eps", "augmented", "split", "accuracy"])
        for r in rows:
            w.writerow([r.kind, repr(r.eps), int(r.augmented), r.split, repr(r.accuracy)])
