"""Training engines: MAP gradient ascent and Stein variational gradient descent.

Particles are flattened to vectors for kernel computations and optimizer
state, in a fixed order: per layer, cores first (each row-major), then rank
scales, then bias; layers in network order.  Flatten/unflatten round-trips
bit-exactly, so single-particle SVGD reproduces plain gradient ascent step
for step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .data import Dataset, batch_stream
from .model import Network, NumericError, Particle, PriorConfig
from .priors import SCALE_FLOOR

__all__ = [
    "MAPConfig",
    "SVGDConfig",
    "ParticleLayout",
    "rbf_kernel",
    "median_bandwidth",
    "svgd_direction",
    "svgd_step",
    "svgd_train",
    "map_train",
    "perturbed_ensemble",
    "predictive_distribution",
    "test_log_likelihood",
    "TraceRow",
]


@dataclass(frozen=True)
class MAPConfig:
    step_size: float = 1e-3
    iterations: int = 100
    batch_size: int = 100
    optimizer: str = "adam"  # adam | sgd
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("need iterations >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class SVGDConfig:
    """``preconditioner="none"`` applies the plain update theta += eps * phi.

    ``"adagrad"`` rescales phi per coordinate by a running RMS of its history
    before stepping.  The plain update is the default but becomes unstable
    once a rank-scale coordinate nears its positivity floor (the Gaussian
    coupling has curvature 1/scale^2, which no fixed step size survives);
    long shrinkage runs should precondition.
    """

    step_size: float = 1e-3
    iterations: int = 100
    batch_size: int = 100
    bandwidth: float | None = None  # None -> median heuristic, else fixed h
    preconditioner: str = "none"  # none | adagrad
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("need iterations >= 0 and batch_size >= 1")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be positive")
        if self.preconditioner not in ("none", "adagrad"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    log_posterior: float
    accuracy: float


class ParticleLayout:
    """Bijection between a particle tree and a flat float64 vector."""

    def __init__(self, net: Network):
        self.net = net
        self._fields = []  # (layer, kind, index, shape, slice)
        offset = 0
        scale_idx = []
        for li, spec in enumerate(net.layers):
            d = spec.shape.order
            for k in range(d):
                shape = (
                    spec.ranks[k],
                    spec.shape.row_factors[k],
                    spec.shape.col_factors[k],
                    spec.ranks[k + 1],
                )
                size = int(np.prod(shape))
                self._fields.append((li, "core", k, shape, slice(offset, offset + size)))
                offset += size
            for k in range(d - 1):
                size = spec.ranks[k + 1]
                sl = slice(offset, offset + size)
                self._fields.append((li, "scale", k, (size,), sl))
                scale_idx.append(np.arange(sl.start, sl.stop))
                offset += size
            size = spec.output_dim
            self._fields.append((li, "bias", 0, (size,), slice(offset, offset + size)))
            offset += size
        self.size = offset
        self.scale_mask = np.zeros(self.size, dtype=bool)
        if scale_idx:
            self.scale_mask[np.concatenate(scale_idx)] = True

    def flatten(self, particle: Particle) -> np.ndarray:
        vec = np.empty(self.size)
        for li, kind, k, _, sl in self._fields:
            lp = particle.layers[li]
            if kind == "core":
                src = lp.cores[k]
            elif kind == "scale":
                src = lp.rank_scales[k]
            else:
                src = lp.bias
            vec[sl] = np.asarray(src, dtype=np.float64).reshape(-1)
        return vec

    def unflatten(self, vec: np.ndarray) -> Particle:
        layers = [mdl.LayerParams([], [], np.empty(0)) for _ in self.net.layers]
        for li, kind, k, shape, sl in self._fields:
            block = np.asarray(vec[sl], dtype=np.float64).reshape(shape).copy()
            if kind == "core":
                layers[li].cores.append(block)
            elif kind == "scale":
                layers[li].rank_scales.append(block)
            else:
                layers[li].bias = block
        return Particle(layers)

    def stack(self, particles: list[Particle]) -> np.ndarray:
        return np.stack([self.flatten(p) for p in particles])

    def unstack(self, theta: np.ndarray) -> list[Particle]:
        return [self.unflatten(row) for row in theta]

    def project_scales(self, theta: np.ndarray) -> None:
        """In-place clamp of every rank-scale coordinate onto [SCALE_FLOOR, inf)."""
        cols = (..., self.scale_mask)
        theta[cols] = np.maximum(theta[cols], SCALE_FLOOR)


def rbf_kernel(u: np.ndarray, v: np.ndarray, h: float) -> float:
    """exp(-||u - v||^2 / h)."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    diff = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff) / h))


def median_bandwidth(theta: np.ndarray) -> float:
    """Median heuristic h = med^2 / log n over pairwise particle distances.

    Falls back to 1.0 for a single particle or coincident particles.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.shape[0]
    if n < 2:
        return 1.0
    sq = _pairwise_sq_dists(theta)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(sq[iu])))
    if med == 0.0:
        return 1.0
    return med ** 2 / math.log(n)


def _pairwise_sq_dists(theta: np.ndarray) -> np.ndarray:
    norms = np.sum(theta * theta, axis=1)
    sq = norms[:, None] + norms[None, :] - 2.0 * (theta @ theta.T)
    return np.maximum(sq, 0.0)


def svgd_direction(theta: np.ndarray, grads: np.ndarray, h: float) -> np.ndarray:
    """Per-particle update direction: kernel-weighted gradients plus repulsion.

    phi_k = (1/n) sum_i [ K_ik g_i + (2/h)(theta_k - theta_i) K_ik ].
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    n = theta.shape[0]
    if n == 1:
        return grads.copy()
    kmat = np.exp(-_pairwise_sq_dists(theta) / h)
    ksum = kmat.sum(axis=0)
    repulsion = (2.0 / h) * (ksum[:, None] * theta - kmat @ theta)
    return (kmat @ grads + repulsion) / n


def _evaluate_ensemble(theta, layout, net, prior, inputs, labels, n_total):
    """Per-particle log posteriors and gradients plus ensemble-mean probabilities."""
    grads = np.empty_like(theta)
    values = np.empty(theta.shape[0])
    prob_sum = None
    for i, row in enumerate(theta):
        particle = layout.unflatten(row)
        value, probs, g = mdl.posterior_value_and_grad(
            net, particle, prior, inputs, labels, n_total
        )
        values[i] = value
        grads[i] = layout.flatten(g)
        prob_sum = probs if prob_sum is None else prob_sum + probs
    return values, prob_sum / theta.shape[0], grads


def _svgd_update(theta, grads, layout, cfg: SVGDConfig, iteration: int, state=None) -> np.ndarray:
    h = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(theta)
    phi = svgd_direction(theta, grads, h)
    if not np.isfinite(phi).all():
        raise NumericError(
            f"non-finite SVGD update at iteration {iteration}", iteration=iteration
        )
    if cfg.preconditioner == "adagrad" and state is not None:
        if iteration == 0:
            state += phi * phi
        else:
            state *= 0.9
            state += 0.1 * phi * phi
        phi = phi / (1e-6 + np.sqrt(state))
    out = theta + cfg.step_size * phi
    layout.project_scales(out)
    return out


def svgd_step(
    theta: np.ndarray,
    layout: ParticleLayout,
    net: Network,
    prior: PriorConfig,
    inputs,
    labels,
    n_total: int,
    cfg: SVGDConfig,
    iteration: int = 0,
) -> np.ndarray:
    """One SVGD update of the stacked particle matrix (all particles share the batch)."""
    _, _, grads = _evaluate_ensemble(theta, layout, net, prior, inputs, labels, n_total)
    return _svgd_update(theta, grads, layout, cfg, iteration)


def svgd_train(
    particles: list[Particle],
    net: Network,
    prior: PriorConfig,
    dataset: Dataset,
    cfg: SVGDConfig,
):
    """Run SVGD over shuffled minibatches; returns (particles, trace).

    The trace records, per iteration, the across-particle mean log-posterior
    estimate and ensemble-mean accuracy on that iteration's batch, both
    evaluated before the update.
    """
    layout = ParticleLayout(net)
    theta = layout.stack(particles)
    n_total = len(dataset)
    trace: list[TraceRow] = []
    stream = batch_stream(dataset, cfg.batch_size, cfg.seed)
    state = np.zeros_like(theta) if cfg.preconditioner == "adagrad" else None
    for it in range(cfg.iterations):
        inputs, labels = next(stream)
        try:
            values, mean_probs, grads = _evaluate_ensemble(
                theta, layout, net, prior, inputs, labels, n_total
            )
            trace.append(TraceRow(it, float(values.mean()), mdl.accuracy(mean_probs, labels)))
            theta = _svgd_update(theta, grads, layout, cfg, it, state)
        except NumericError as err:
            err.last_good = layout.unstack(theta)
            err.iteration = it
            raise
    return layout.unstack(theta), trace


def map_train(
    particle: Particle,
    net: Network,
    prior: PriorConfig,
    dataset: Dataset,
    cfg: MAPConfig,
):
    """Maximize the log posterior by sgd or adam; returns (particle, trace)."""
    layout = ParticleLayout(net)
    theta = layout.stack([particle])
    n_total = len(dataset)
    trace: list[TraceRow] = []
    stream = batch_stream(dataset, cfg.batch_size, cfg.seed)
    m = np.zeros(layout.size)
    v = np.zeros(layout.size)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for it in range(cfg.iterations):
        inputs, labels = next(stream)
        try:
            values, mean_probs, grads = _evaluate_ensemble(
                theta, layout, net, prior, inputs, labels, n_total
            )
        except NumericError as err:
            err.last_good = layout.unflatten(theta[0])
            err.iteration = it
            raise
        trace.append(TraceRow(it, float(values.mean()), mdl.accuracy(mean_probs, labels)))
        grad = grads[0]
        if not np.isfinite(grad).all():
            raise NumericError(
                f"non-finite gradient at iteration {it}",
                iteration=it,
                last_good=layout.unflatten(theta[0]),
            )
        if cfg.optimizer == "sgd":
            theta[0] += cfg.step_size * grad
        else:
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            m_hat = m / (1.0 - beta1 ** (it + 1))
            v_hat = v / (1.0 - beta2 ** (it + 1))
            theta[0] += cfg.step_size * m_hat / (np.sqrt(v_hat) + eps)
        layout.project_scales(theta)
    return layout.unflatten(theta[0]), trace


def perturbed_ensemble(
    first: Particle,
    net: Network,
    n_particles: int,
    seed: int = 0,
    noise_scale: float = 0.1,
) -> list[Particle]:
    """Ensemble of n particles: the given one plus copies with fresh core noise.

    Each extra particle adds ``noise_scale`` times a fresh core-initialization
    draw to the cores; rank scales and biases are shared unperturbed.
    """
    from . import priors as pr

    particles = [first.copy()]
    rng = np.random.default_rng(seed)
    for _ in range(n_particles - 1):
        p = first.copy()
        for spec, lp in zip(net.layers, p.layers):
            cfg = pr.InitConfig(
                full_size=spec.input_dim * spec.output_dim,
                max_rank=max(spec.ranks),
                order=spec.shape.order,
                seed=int(rng.integers(2 ** 63)),
            )
            noise = pr.init_cores(spec.shape, spec.ranks, cfg)
            lp.cores = [c + noise_scale * nc for c, nc in zip(lp.cores, noise)]
        particles.append(p)
    return particles


def predictive_distribution(particles: list[Particle], net: Network, inputs):
    """Ensemble-mean class probabilities plus the per-particle outputs (n, B, S)."""
    per = np.stack([mdl.forward(net, p, np.atleast_2d(inputs)) for p in particles])
    return per.mean(axis=0), per


def test_log_likelihood(particles: list[Particle], net: Network, dataset: Dataset) -> float:
    """Mean over test points of log of the ensemble-averaged true-class probability."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    mean_probs, _ = predictive_distribution(particles, net, dataset.inputs)
    true_prob = np.sum(mean_probs * dataset.labels, axis=1)
    return float(np.mean(np.log(np.maximum(true_prob, mdl.PROB_CLAMP))))
