"""Reporting surface: certified-accuracy curves, ACR, envelopes, accuracy
tables, and Frechet distances between feature distributions.

CSV schemas:
    curves  kind, sigma, split, radius, cert_acc
    tables  method, split, metric, mean, std
    fid     target_domain, fid, rfid, delta_acr

Each CSV writer has a companion SVG line-plot emitter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import attack as atk, diffnet as dn
from .certify import CertOutcome


@dataclass(frozen=True)
class CertCurve:
    grid: np.ndarray  # ascending radii
    accuracy: np.ndarray  # certified accuracy at each grid point
    kind: str  # "pixel" or a deformation kind
    sigma: float | str  # smoothing scale, or "envelope"
    split: str  # "source" | "target"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        acc = np.asarray(self.accuracy, dtype=np.float64)
        if grid.ndim != 1 or grid.shape != acc.shape:
            raise ValueError("grid and accuracy must be matching 1-D arrays")
        if np.any(np.diff(grid) < 0):
            raise ValueError("radius grid must be ascending")
        if np.any(np.diff(acc) > 1e-12):
            raise ValueError("certified accuracy must be non-increasing along the grid")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "accuracy", acc)


@dataclass(frozen=True)
class DomainStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int
    rank_deficient: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        if np.abs(cov - cov.T).max() > 1e-10:
            raise ValueError("covariance must be symmetric within 1e-10")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


# ---------------------------------------------------------------------------
# curves


def certified_curve(
    outcomes: Sequence[CertOutcome],
    labels: Sequence[int],
    grid: np.ndarray,
    kind: str = "pixel",
    sigma: float | str = 0.0,
    split: str = "source",
) -> CertCurve:
    """Fraction of samples certified correct with radius >= R, per grid R."""
    if len(outcomes) == 0:
        raise ValueError("empty outcome list")
    if len(outcomes) != len(labels):
        raise ValueError("one label per outcome required")
    grid = np.asarray(grid, dtype=np.float64)
    radii = np.array(
        [
            o.radius if (o.certified and o.predicted == y) else -np.inf
            for o, y in zip(outcomes, labels)
        ]
    )
    acc = (radii[None, :] >= grid[:, None]).mean(axis=1)
    return CertCurve(grid, acc, kind, sigma, split)


def acr(outcomes: Sequence[CertOutcome], labels: Sequence[int]) -> float:
    """Mean certified radius over certified, correctly classified samples."""
    if len(outcomes) == 0:
        raise ValueError("empty outcome list")
    radii = [o.radius for o, y in zip(outcomes, labels) if o.certified and o.predicted == y]
    if not radii:
        return 0.0
    return float(np.mean(radii))


def envelope(curves: Sequence[CertCurve]) -> CertCurve:
    """Pointwise maximum over curves sharing a grid."""
    if len(curves) == 0:
        raise ValueError("need at least one curve")
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid.shape != grid.shape or np.any(c.grid != grid):
            raise ValueError("envelope requires identical radius grids")
    acc = np.max(np.stack([c.accuracy for c in curves]), axis=0)
    return CertCurve(grid, acc, curves[0].kind, "envelope", curves[0].split)


def default_radius_grid(outcomes: Sequence[CertOutcome], points: int = 200) -> np.ndarray:
    """0 to twice the largest observed radius (or 1.0 when nothing certified)."""
    top = max((o.radius for o in outcomes if o.certified), default=0.0)
    if top <= 0:
        top = 0.5
    return np.linspace(0.0, 2.0 * top, points)


# ---------------------------------------------------------------------------
# feature statistics and Frechet distance


def extract_features(net: dn.Network, images: np.ndarray) -> DomainStats:
    """Penultimate-layer statistics with 1/(n-1) covariance normalization."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples for covariance, got {n}")
    feats = dn.features_batch(net, images)
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return DomainStats(mean, cov, n, rank_deficient=n < feats.shape[1] + 1)


def pooled_stats(parts: Sequence[DomainStats]) -> DomainStats:
    """Moments of the concatenation of the underlying datasets."""
    total = sum(p.count for p in parts)
    mean = sum(p.count * p.mean for p in parts) / total
    scatter = np.zeros_like(parts[0].cov)
    for p in parts:
        d = (p.mean - mean)[:, None]
        scatter += (p.count - 1) * p.cov + p.count * (d @ d.T)
    cov = scatter / (total - 1)
    rank_def = any(p.rank_deficient for p in parts) and total < mean.size + 1
    return DomainStats(mean, 0.5 * (cov + cov.T), total, rank_deficient=rank_def)


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    floor = -tol * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise ValueError(f"matrix is not PSD beyond tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: DomainStats, stats_b: DomainStats) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross
    square root computed through the symmetrized product
    S_a^{1/2} S_b S_a^{1/2}; tiny negative eigenvalues are truncated to 0.
    """
    if stats_a.mean.size != stats_b.mean.size:
        raise ValueError(
            f"feature dimensions differ: {stats_a.mean.size} vs {stats_b.mean.size}"
        )
    root_a = _psd_sqrt(stats_a.cov)
    inner = root_a @ stats_b.cov @ root_a
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigh(inner)[0]
    floor = -1e-10 * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise ValueError(f"cross term is not PSD beyond tolerance ({vals.min():.3e})")
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = stats_a.mean - stats_b.mean
    value = float(diff @ diff + np.trace(stats_a.cov) + np.trace(stats_b.cov) - 2.0 * tr_cross)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# accuracy tables


@dataclass(frozen=True)
class TableRow:
    method: str
    split: str
    metric: str
    mean: float
    std: float


def accuracy_table(
    runs: Mapping[str, Sequence[dn.Network]],
    datasets: Mapping[str, tuple[np.ndarray, np.ndarray]],
    cfg: atk.AttackConfig,
    seed: int = 0,
    threads: int = 1,
) -> list[TableRow]:
    """Clean and PGD robust accuracy per method and split, mean +- std over seeds."""
    if not runs:
        raise ValueError("no trained runs supplied")
    for method, nets in runs.items():
        if len(nets) == 0:
            raise ValueError(f"method {method!r} has no trained networks")
    rows = []
    for method in runs:
        for split, (images, labels) in datasets.items():
            clean = [atk.clean_accuracy(net, images, labels) for net in runs[method]]
            robust = [
                atk.robust_accuracy(net, images, labels, cfg, seed=seed, threads=threads)
                for net in runs[method]
            ]
            for metric, vals in (("clean_acc", clean), ("robust_acc", robust)):
                arr = np.asarray(vals)
                rows.append(TableRow(method, split, metric, float(arr.mean()), float(arr.std())))
    return rows


# ---------------------------------------------------------------------------
# CSV and SVG emission


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_curves_csv(path, curves: Sequence[CertCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "sigma", "split", "radius", "cert_acc"])
        for c in curves:
            for r, a in zip(c.grid, c.accuracy):
                w.writerow([c.kind, _fmt(c.sigma), c.split, _fmt(r), _fmt(a)])


def write_table_csv(path, rows: Sequence[TableRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "split", "metric", "mean", "std"])
        for r in rows:
            w.writerow([r.method, r.split, r.metric, _fmt(r.mean), _fmt(r.std)])


def write_fid_csv(path, entries: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_domain", "fid", "rfid", "delta_acr"])
        for e in entries:
            w.writerow([e["target_domain"], _fmt(e["fid"]), _fmt(e["rfid"]), _fmt(e["delta_acr"])])


def _configure_matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "certshift"
    import matplotlib.pyplot as plt

    return plt


def plot_curves_svg(path, curves: Sequence[CertCurve], title: str = "") -> None:
    plt = _configure_matplotlib()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for c in curves:
        style = "--" if c.split == "source" else "-"
        ax.plot(c.grid, c.accuracy, style, label=f"{c.split} sigma={c.sigma}")
    ax.set_xlabel("radius")
    ax.set_ylabel("certified accuracy")
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_table_svg(path, rows: Sequence[TableRow], title: str = "") -> None:
    plt = _configure_matplotlib()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    methods = sorted({r.method for r in rows})
    combos = sorted({(r.split, r.metric) for r in rows})
    xs = np.arange(len(combos))
    for m in methods:
        vals = []
        errs = []
        for combo in combos:
            row = next(r for r in rows if r.method == m and (r.split, r.metric) == combo)
            vals.append(row.mean)
            errs.append(row.std)
        ax.errorbar(xs, vals, yerr=errs, marker="o", capsize=2, label=m)
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{s}\n{m}" for s, m in combos], fontsize=7)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
