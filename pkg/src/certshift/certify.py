"""Randomized-smoothing certification with Monte Carlo confidence bounds.

Pixel smoothing adds Gaussian noise to the image; parametric smoothing
perturbs deformation parameters and warps. Both use the same two-phase
procedure: a small selection round picks the majority class, a fresh
estimation round yields a one-sided Clopper-Pearson lower bound on its
probability, and the bound is converted to a radius:

    Gaussian noise at scale sigma:   R = sigma * Phi^{-1}(p_lower)
    Uniform[-sigma, sigma] (1-D):    R = sigma * (2 * p_lower - 1)

A lower bound of at most 1/2 yields abstention. Noisy inputs are fed to the
classifier unclamped; clamping would change the smoothing measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import deform, diffnet as dn
from .parallel import map_chunks

ABSTAIN = -1
_CHUNK = 500  # Monte Carlo evaluations per forward batch


@dataclass(frozen=True)
class SmoothingConfig:
    distribution: str = "gaussian"  # "gaussian" | "uniform"
    sigma: float = 0.25
    n0: int = 100
    n: int = 10000
    alpha: float = 0.001
    base_params: np.ndarray | None = None  # parametric base point, defaults to 0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "uniform"):
            raise ValueError(f"distribution must be gaussian or uniform, got {self.distribution!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.n0 < 10:
            raise ValueError(f"n0 must be >= 10, got {self.n0}")
        if self.n < self.n0:
            raise ValueError(f"n must be >= n0, got n={self.n}, n0={self.n0}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.base_params is not None:
            object.__setattr__(
                self, "base_params", np.asarray(self.base_params, dtype=np.float64)
            )


@dataclass(frozen=True)
class CertOutcome:
    verdict: str  # "certified" | "abstain"
    predicted: int  # ABSTAIN when abstaining
    p_lower: float
    radius: float

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"


# ---------------------------------------------------------------------------
# standard normal quantile


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _rational_quantile_guess(p: float) -> float:
    # Abramowitz & Stegun 26.2.23, |error| < 4.5e-4; refined by Newton below.
    t = math.sqrt(-2.0 * math.log(min(p, 1.0 - p)))
    num = 2.515517 + t * (0.802853 + t * 0.010328)
    den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308))
    x = t - num / den
    return -x if p < 0.5 else x


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile, absolute error below 1e-9 on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    x = _rational_quantile_guess(p)
    for _ in range(20):
        err = norm_cdf(x) - p
        pdf = _norm_pdf(x)
        if pdf == 0.0:
            break
        step = err / pdf
        x -= step
        if abs(step) < 1e-13:
            break
    return x


# ---------------------------------------------------------------------------
# Clopper-Pearson lower bound


def _log_binom_tail(k: int, n: int, log_p: float, log_q: float) -> float:
    """log P[Bin(n, p) >= k] via a log-space sum of exact terms."""
    j = np.arange(k, n + 1, dtype=np.float64)
    log_coef = (
        math.lgamma(n + 1)
        - np.array([math.lgamma(v + 1) for v in j])
        - np.array([math.lgamma(n - v + 1) for v in j])
    )
    terms = log_coef + j * log_p + (n - j) * log_q
    m = terms.max()
    return float(m + math.log(np.exp(terms - m).sum()))


def binom_lower_bound(k: int, n: int, alpha: float) -> float:
    """One-sided Clopper-Pearson lower confidence bound on a binomial p.

    Largest p such that P[Bin(n, p) >= k] <= alpha, found by bisection on
    the exact tail computed in log space. k = 0 gives 0; k = n gives
    alpha ** (1/n).
    """
    if not 0 <= k <= n or n <= 0:
        raise ValueError(f"need 0 <= k <= n with n > 0, got k={k}, n={n}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    log_alpha = math.log(alpha)
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        tail = _log_binom_tail(k, n, math.log(mid), math.log1p(-mid))
        if tail > log_alpha:
            hi = mid
        else:
            lo = mid
    return lo


# ---------------------------------------------------------------------------
# radii


def radius_from_p_lower(p_lower: float, cfg: SmoothingConfig) -> float:
    """Certified radius for a lower bound on the top-class probability."""
    if cfg.distribution == "gaussian":
        return cfg.sigma * inv_norm_cdf(p_lower)
    return cfg.sigma * (2.0 * p_lower - 1.0)


def _outcome(counts: np.ndarray, c_hat: int, n: int, cfg: SmoothingConfig) -> CertOutcome:
    k = int(counts[c_hat])
    p_lower = binom_lower_bound(k, n, cfg.alpha)
    if p_lower <= 0.5:
        return CertOutcome("abstain", ABSTAIN, p_lower, 0.0)
    return CertOutcome("certified", int(c_hat), p_lower, radius_from_p_lower(p_lower, cfg))


# ---------------------------------------------------------------------------
# Monte Carlo vote counting


def _pixel_votes(net, x, cfg, n, rng) -> np.ndarray:
    counts = np.zeros(net.num_classes, dtype=np.int64)
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        noisy = x[None] + cfg.sigma * rng.standard_normal((m,) + x.shape)
        preds = dn.forward_batch(net, noisy).argmax(axis=1)
        counts += np.bincount(preds, minlength=net.num_classes)
        done += m
    return counts


def _param_draws(cfg: SmoothingConfig, dim: int, m: int, rng) -> np.ndarray:
    if cfg.distribution == "gaussian":
        return cfg.sigma * rng.standard_normal((m, dim))
    return rng.uniform(-cfg.sigma, cfg.sigma, size=(m, dim))


def _deform_votes(net, x, kind, cfg, n, rng, dct_order=2) -> np.ndarray:
    dim = deform.param_count(kind, dct_order)
    base = cfg.base_params if cfg.base_params is not None else np.zeros(dim)
    if base.shape != (dim,):
        raise ValueError(f"base_params shape {base.shape} does not match {kind} ({dim})")
    counts = np.zeros(net.num_classes, dtype=np.int64)
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        params = base[None] + _param_draws(cfg, dim, m, rng)
        warped = deform.apply_deformation_batch(x, kind, params, dct_order)
        preds = dn.forward_batch(net, warped).argmax(axis=1)
        counts += np.bincount(preds, minlength=net.num_classes)
        done += m
    return counts


def _certify_two_phase(vote_fn, net, cfg, seed) -> CertOutcome:
    rng0 = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    counts0 = vote_fn(cfg.n0, rng0)
    c_hat = int(counts0.argmax())  # ties resolve to the lowest class id
    rng1 = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    counts = vote_fn(cfg.n, rng1)
    return _outcome(counts, c_hat, cfg.n, cfg)


def certify_pixel(net: dn.Network, x: np.ndarray, cfg: SmoothingConfig, seed: int = 0) -> CertOutcome:
    """Certify additive pixel perturbations under Gaussian smoothing."""
    if cfg.distribution != "gaussian":
        raise ValueError("pixel smoothing is Gaussian-only")
    x = np.asarray(x, dtype=np.float64)
    return _certify_two_phase(lambda n, rng: _pixel_votes(net, x, cfg, n, rng), net, cfg, seed)


def certify_deform(
    net: dn.Network,
    x: np.ndarray,
    kind: str,
    cfg: SmoothingConfig,
    seed: int = 0,
    dct_order: int = 2,
) -> CertOutcome:
    """Certify perturbations of the deformation parameters.

    Uniform smoothing is limited to one-dimensional parameter spaces
    (rotation, scaling): the uniform radius bound does not specify a norm
    for multi-dimensional parameters.
    """
    dim = deform.param_count(kind, dct_order)
    if cfg.distribution == "uniform" and dim != 1:
        raise ValueError(
            f"uniform smoothing supports only 1-D parameter deformations, {kind} has {dim}"
        )
    x = np.asarray(x, dtype=np.float64)
    return _certify_two_phase(
        lambda n, rng: _deform_votes(net, x, kind, cfg, n, rng, dct_order), net, cfg, seed
    )


def smoothed_predict(
    net: dn.Network,
    x: np.ndarray,
    cfg: SmoothingConfig,
    n: int,
    kind: str | None = None,
    seed: int = 0,
    dct_order: int = 2,
) -> tuple[int, np.ndarray]:
    """Majority vote over n noisy (kind=None) or deformed evaluations."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    if kind is None:
        if cfg.distribution != "gaussian":
            raise ValueError("pixel smoothing is Gaussian-only")
        counts = _pixel_votes(net, x, cfg, n, rng)
    else:
        counts = _deform_votes(net, x, kind, cfg, n, rng, dct_order)
    return int(counts.argmax()), counts


def certify_dataset(
    net: dn.Network,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: SmoothingConfig,
    mode: str = "pixel",
    seed: int = 0,
    threads: int = 1,
    dct_order: int = 2,
) -> list[CertOutcome]:
    """Certify every sample; per-sample seeds make this thread-count invariant."""
    images = np.asarray(images, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("empty dataset")

    def run(start: int, xs: np.ndarray, _ys) -> list[CertOutcome]:
        out = []
        for offset, x in enumerate(xs):
            sample_seed = np.random.SeedSequence([seed, start + offset]).generate_state(1)[0]
            if mode == "pixel":
                out.append(certify_pixel(net, x, cfg, seed=int(sample_seed)))
            else:
                out.append(certify_deform(net, x, mode, cfg, seed=int(sample_seed), dct_order=dct_order))
        return out

    chunks = map_chunks(run, images, labels, chunk=8, threads=threads)
    return [o for chunk in chunks for o in chunk]
