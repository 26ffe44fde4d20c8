"""Rank-coupled shrinkage prior over TT cores.

Each internal TT rank k carries a positive scale vector ``s^(k)`` of length
R_k.  Core entries get zero-mean Gaussian priors whose *variance* couples
the scales of the two adjacent ranks:

* middle core k:      Var[G_k(r, m, j, q)] = s^(k-1)_r * s^(k)_q
* first core:         Var[G_1(0, m, j, q)] = (s^(1)_q)^2
* last core:          Var[G_d(r, m, j, 0)] = (s^(d-1)_r)^2

so a scale entry near zero pins an entire column-slice of one core and the
matching row-slice of the next to zero, which is what makes thresholding
the posterior-mean scales a rank estimate.  The scales themselves get i.i.d.
Gamma(shape, rate) priors; non-tensorized parameters (biases) get a wide
zero-mean Gaussian.  All log-densities include their normalization
constants so finite-difference checks are exact.

Scales are kept positive by projection onto ``[SCALE_FLOOR, inf)`` after
every gradient update rather than by reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tt import FactorizedShape, TTShapeError

__all__ = [
    "SCALE_FLOOR",
    "PriorConfig",
    "InitConfig",
    "gaussian_log_density",
    "gamma_log_density",
    "core_variance",
    "log_prior",
    "grad_log_prior_core",
    "grad_log_prior_scales",
    "grad_weak_prior",
    "core_init_variance",
    "init_cores",
    "init_rank_scales",
    "project_scales",
]

SCALE_FLOOR = 1e-8

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters: Gamma(shape, rate) on rank scales, N(0, weak_variance) elsewhere."""

    gamma_shape: float = 1.0
    gamma_rate: float = 5.0
    weak_variance: float = 100.0

    def __post_init__(self):
        if self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ValueError("gamma shape and rate must be positive")
        if self.weak_variance <= 0:
            raise ValueError("weak_variance must be positive")

    @property
    def scale_prior_mean(self) -> float:
        return self.gamma_shape / self.gamma_rate


@dataclass(frozen=True)
class InitConfig:
    """Core initialization: i.i.d. N(0, sigma^2) entries.

    ``full_size`` is the element count of the uncompressed matrix and
    ``max_rank`` the common internal rank the variance formula assumes.
    """

    full_size: int
    max_rank: int
    order: int
    seed: int = 0

    def __post_init__(self):
        if self.full_size < 1 or self.max_rank < 1 or self.order < 2:
            raise ValueError("need full_size >= 1, max_rank >= 1, order >= 2")


def _check_scales(scales) -> list[np.ndarray]:
    out = []
    for k, vec in enumerate(scales):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError(f"rank-scale vector {k} must be 1-D")
        if not np.isfinite(vec).all() or (vec < SCALE_FLOOR).any():
            raise ValueError(
                f"rank-scale vector {k} has entries below the floor {SCALE_FLOOR}"
            )
        out.append(vec)
    return out


def gaussian_log_density(x: np.ndarray, variance) -> float:
    """Sum of log N(x | 0, variance); variance broadcasts against x."""
    v = np.broadcast_to(np.asarray(variance, dtype=np.float64), np.shape(x))
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(-0.5 * (LOG_2PI + np.log(v)) - x * x / (2.0 * v)))


def gamma_log_density(x: np.ndarray, shape: float, rate: float) -> float:
    """Sum of log Ga(x | shape, rate) with the rate parameterization."""
    x = np.asarray(x, dtype=np.float64)
    const = shape * math.log(rate) - math.lgamma(shape)
    return float(np.sum(const + (shape - 1.0) * np.log(x) - rate * x))


def core_variance(k: int, order: int, scales: list[np.ndarray]) -> np.ndarray:
    """Prior variance field of core ``k`` (0-based), broadcastable to its shape."""
    if k == 0:
        return (scales[0] ** 2)[None, None, None, :]
    if k == order - 1:
        return (scales[order - 2] ** 2)[:, None, None, None]
    return scales[k - 1][:, None, None, None] * scales[k][None, None, None, :]


def log_prior(cores, scales, prior: PriorConfig, extras=()) -> float:
    """Log prior density of one layer: cores + rank scales + extra parameters.

    ``extras`` is an iterable of arrays (e.g. biases) under the weak
    N(0, weak_variance) prior.
    """
    scales = _check_scales(scales)
    d = len(cores)
    if d and len(scales) != d - 1:
        raise ValueError(f"expected {d - 1} rank-scale vectors, got {len(scales)}")
    total = 0.0
    for k, core in enumerate(cores):
        total += gaussian_log_density(core, core_variance(k, d, scales))
    for vec in scales:
        total += gamma_log_density(vec, prior.gamma_shape, prior.gamma_rate)
    for arr in extras:
        total += gaussian_log_density(arr, prior.weak_variance)
    return total


def grad_log_prior_core(core, scale_left, scale_right, position: str) -> np.ndarray:
    """Gradient of the log prior with respect to one core: -G / Var(G).

    ``position`` is one of ``first`` / ``middle`` / ``last``; first and last
    cores use the squared single-scale variance.
    """
    core = np.asarray(core, dtype=np.float64)
    if position == "first":
        (right,) = _check_scales([scale_right])
        variance = (right ** 2)[None, None, None, :]
    elif position == "last":
        (left,) = _check_scales([scale_left])
        variance = (left ** 2)[:, None, None, None]
    elif position == "middle":
        left, right = _check_scales([scale_left, scale_right])
        variance = left[:, None, None, None] * right[None, None, None, :]
    else:
        raise ValueError(f"unknown position {position!r}")
    return -core / variance


def grad_log_prior_scales(k: int, cores, scales, prior: PriorConfig) -> np.ndarray:
    """Gradient of the layer log prior with respect to rank-scale vector ``k``.

    Vector ``k`` (0-based, length R_{k+1}) is the right scale of core ``k``
    and the left scale of core ``k+1``.  Per coupled entry of a middle core
    with variance v = s_other * s the contribution is
    ``-1/(2 s) + G^2 / (2 s^2 s_other)``; for the squared boundary variance
    v = s^2 it is ``-1/s + G^2 / s^3``.  The Gamma prior adds
    ``(shape - 1)/s - rate``.
    """
    scales = _check_scales(scales)
    d = len(cores)
    if not (0 <= k <= d - 2):
        raise ValueError(f"scale index {k} out of range for {d} cores")
    s = scales[k]
    grad = (prior.gamma_shape - 1.0) / s - prior.gamma_rate

    # core k couples through its right rank axis (axis 3)
    core = np.asarray(cores[k], dtype=np.float64)
    if k == 0:
        sq = np.sum(core ** 2, axis=(0, 1, 2))
        count = core.shape[0] * core.shape[1] * core.shape[2]
        grad = grad - count / s + sq / s ** 3
    else:
        inv_left = 1.0 / scales[k - 1]
        sq = np.einsum("rmjl,r->l", core ** 2, inv_left)
        count = core.shape[0] * core.shape[1] * core.shape[2]
        grad = grad - count / (2.0 * s) + sq / (2.0 * s ** 2)

    # core k+1 couples through its left rank axis (axis 0)
    core = np.asarray(cores[k + 1], dtype=np.float64)
    if k + 1 == d - 1:
        sq = np.sum(core ** 2, axis=(1, 2, 3))
        count = core.shape[1] * core.shape[2] * core.shape[3]
        grad = grad - count / s + sq / s ** 3
    else:
        inv_right = 1.0 / scales[k + 1]
        sq = np.einsum("lmjq,q->l", core ** 2, inv_right)
        count = core.shape[1] * core.shape[2] * core.shape[3]
        grad = grad - count / (2.0 * s) + sq / (2.0 * s ** 2)
    return grad


def grad_weak_prior(values, prior: PriorConfig) -> np.ndarray:
    """Gradient of sum log N(values | 0, weak_variance): -values / weak_variance."""
    return -np.asarray(values, dtype=np.float64) / prior.weak_variance


def core_init_variance(full_size: int, max_rank: int, order: int) -> float:
    """Entry variance (2/Q)^(1/2d) * R^(1/d - 1) for i.i.d. core initialization.

    With all internal ranks equal to R this makes the reconstructed matrix
    entries have variance sqrt(2/Q), Q being the uncompressed element count.
    """
    d = order
    return (2.0 / full_size) ** (1.0 / (2 * d)) * max_rank ** (1.0 / d - 1.0)


def init_cores(shape: FactorizedShape, ranks, cfg: InitConfig) -> list[np.ndarray]:
    """Draw i.i.d. N(0, sigma^2) cores for the given shape and rank vector."""
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != shape.order + 1:
        raise TTShapeError("rank vector length must be order + 1")
    sigma = math.sqrt(core_init_variance(cfg.full_size, cfg.max_rank, cfg.order))
    rng = np.random.default_rng(cfg.seed)
    return [
        rng.normal(0.0, sigma, size=(ranks[k], mk, jk, ranks[k + 1]))
        for k, (mk, jk) in enumerate(zip(shape.row_factors, shape.col_factors))
    ]


def init_rank_scales(ranks, prior: PriorConfig, seed: int = 0, sampled: bool = False):
    """Initialize one scale vector per internal rank.

    Deterministic mode sets every entry to the prior mean shape/rate;
    ``sampled`` draws from the Gamma prior instead (reproducible per seed).
    """
    internal = tuple(int(r) for r in ranks)[1:-1]
    if sampled:
        rng = np.random.default_rng(seed)
        vecs = [
            rng.gamma(prior.gamma_shape, 1.0 / prior.gamma_rate, size=r)
            for r in internal
        ]
    else:
        vecs = [np.full(r, prior.scale_prior_mean) for r in internal]
    return [project_scales(v) for v in vecs]


def project_scales(values: np.ndarray) -> np.ndarray:
    """Clamp rank scales onto the positive domain [SCALE_FLOOR, inf)."""
    return np.maximum(np.asarray(values, dtype=np.float64), SCALE_FLOOR)
