"""Tensorized feed-forward classifier and its log-posterior gradients.

A network is a chain of TT-matrix linear layers with biases: hidden layers
apply ReLU, the final layer softmax.  A particle bundles every trainable
value of one model instance (cores, rank scales, biases).  Gradients are
computed by hand-rolled reverse mode through the TT contraction sequence;
dense weight matrices are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import priors, tt
from .priors import PriorConfig
from .tt import FactorizedShape, TTShapeError

__all__ = [
    "NumericError",
    "LayerSpec",
    "Network",
    "LayerParams",
    "Particle",
    "init_particle",
    "softmax",
    "forward",
    "forward_with_cache",
    "cross_entropy",
    "accuracy",
    "log_likelihood",
    "grad_log_likelihood",
    "log_prior_particle",
    "log_posterior",
    "grad_log_posterior",
]

HIDDEN_ACTIVATIONS = ("relu", "identity")
PROB_CLAMP = 1e-12


class NumericError(RuntimeError):
    """Non-finite values encountered during evaluation or training."""

    def __init__(self, message, iteration=None, last_good=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


@dataclass(frozen=True)
class LayerSpec:
    """Shape contract of one TT linear layer (maps dim M to dim J)."""

    shape: FactorizedShape
    ranks: tuple[int, ...]
    activation: str

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        object.__setattr__(self, "ranks", ranks)
        if len(ranks) != self.shape.order + 1:
            raise TTShapeError("rank vector length must be order + 1")
        if ranks[0] != 1 or ranks[-1] != 1:
            raise TTShapeError("boundary ranks must be 1")
        if any(r < 1 for r in ranks):
            raise TTShapeError("ranks must be >= 1")
        if self.activation not in HIDDEN_ACTIVATIONS + ("softmax",):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def uniform_rank(cls, row_factors, col_factors, max_rank: int, activation: str):
        shape = FactorizedShape(tuple(row_factors), tuple(col_factors))
        ranks = (1,) + (int(max_rank),) * (shape.order - 1) + (1,)
        return cls(shape, ranks, activation)

    @property
    def input_dim(self) -> int:
        return self.shape.nrows

    @property
    def output_dim(self) -> int:
        return self.shape.ncols

    @property
    def param_count(self) -> int:
        return tt.tt_param_count(self.shape, self.ranks) + self.output_dim


@dataclass(frozen=True)
class Network:
    """Architecture only; parameters live in particles."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.output_dim != b.input_dim:
                raise TTShapeError(
                    f"layer dims do not chain: {a.output_dim} -> {b.input_dim}"
                )
        for spec in layers[:-1]:
            if spec.activation == "softmax":
                raise ValueError("softmax is only valid on the final layer")
        if layers[-1].activation != "softmax":
            raise ValueError("final layer must use softmax")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].output_dim


@dataclass
class LayerParams:
    """Trainable values of one layer: TT cores, rank scales, bias."""

    cores: list[np.ndarray]
    rank_scales: list[np.ndarray]
    bias: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(
            [c.copy() for c in self.cores],
            [s.copy() for s in self.rank_scales],
            self.bias.copy(),
        )


@dataclass
class Particle:
    """One complete parameter assignment for a network."""

    layers: list[LayerParams]

    def copy(self) -> "Particle":
        return Particle([lp.copy() for lp in self.layers])


def init_particle(net: Network, prior: PriorConfig, seed: int = 0) -> Particle:
    """Random cores, prior-mean rank scales, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in net.layers:
        core_seed = int(rng.integers(2 ** 63))
        cfg = priors.InitConfig(
            full_size=spec.input_dim * spec.output_dim,
            max_rank=max(spec.ranks),
            order=spec.shape.order,
            seed=core_seed,
        )
        layers.append(
            LayerParams(
                cores=priors.init_cores(spec.shape, spec.ranks, cfg),
                rank_scales=priors.init_rank_scales(spec.ranks, prior),
                bias=np.zeros(spec.output_dim),
            )
        )
    return Particle(layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_with_cache(net: Network, particle: Particle, inputs: np.ndarray):
    """Class probabilities plus the per-layer state backward needs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise TTShapeError(
            f"inputs must be (batch, {net.input_dim}), got {x.shape}"
        )
    caches = []
    a = x
    z = None
    for spec, lp in zip(net.layers, particle.layers):
        z, cache = tt.apply_batch_forward(lp.cores, a)
        z = z + lp.bias
        if not np.isfinite(z).all():
            raise NumericError("non-finite activations in forward pass")
        caches.append((cache, z))
        if spec.activation == "relu":
            a = np.maximum(z, 0.0)
        elif spec.activation == "identity":
            a = z
    probs = softmax(z)
    return probs, caches


def forward(net: Network, particle: Particle, inputs: np.ndarray) -> np.ndarray:
    probs, _ = forward_with_cache(net, particle, inputs)
    return probs


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Summed cross-entropy -sum_i sum_s y_is log p_is, probabilities clamped at 1e-12."""
    p = np.maximum(np.asarray(probs, dtype=np.float64), PROB_CLAMP)
    return float(-np.sum(np.asarray(labels, dtype=np.float64) * np.log(p)))


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax matches; ties break to the lowest class index."""
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(labels, axis=1)))


def log_likelihood(net: Network, particle: Particle, inputs, labels) -> float:
    return -cross_entropy(forward(net, particle, inputs), labels)


def _zero_scales_like(lp: LayerParams) -> list[np.ndarray]:
    return [np.zeros_like(s) for s in lp.rank_scales]


def _likelihood_grads(net, particle, probs, caches, labels):
    delta = np.asarray(labels, dtype=np.float64) - probs  # d logL / d final logits
    grads = []
    for idx in range(len(net.layers) - 1, -1, -1):
        lp = particle.layers[idx]
        cache, _ = caches[idx]
        grad_bias = delta.sum(axis=0)
        grad_in, grad_cores = tt.apply_batch_backward(lp.cores, cache, delta)
        grads.append(LayerParams(grad_cores, _zero_scales_like(lp), grad_bias))
        if idx > 0:
            _, z_prev = caches[idx - 1]
            act = net.layers[idx - 1].activation
            delta = grad_in * (z_prev > 0.0) if act == "relu" else grad_in
    grads.reverse()
    return Particle(grads)


def grad_log_likelihood(net: Network, particle: Particle, inputs, labels) -> Particle:
    """Reverse-mode gradient of the summed log-likelihood.

    Rank-scale components are zero (the likelihood does not touch them).
    """
    probs, caches = forward_with_cache(net, particle, inputs)
    return _likelihood_grads(net, particle, probs, caches, labels)


def log_prior_particle(net: Network, particle: Particle, prior: PriorConfig) -> float:
    total = 0.0
    for lp in particle.layers:
        total += priors.log_prior(lp.cores, lp.rank_scales, prior, extras=[lp.bias])
    return total


def log_posterior(
    net: Network,
    particle: Particle,
    prior: PriorConfig,
    inputs,
    labels,
    n_total: int | None = None,
) -> float:
    """Unnormalized log posterior; minibatch likelihood rescaled by N/batch."""
    batch = len(np.asarray(inputs))
    if batch == 0:
        raise ValueError("empty batch")
    scale = 1.0 if n_total is None else n_total / batch
    return scale * log_likelihood(net, particle, inputs, labels) + log_prior_particle(
        net, particle, prior
    )


def _core_position(k: int, order: int) -> str:
    if k == 0:
        return "first"
    if k == order - 1:
        return "last"
    return "middle"


def posterior_value_and_grad(
    net: Network,
    particle: Particle,
    prior: PriorConfig,
    inputs,
    labels,
    n_total: int | None = None,
):
    """One forward/backward pass: (log posterior, class probs, gradient particle).

    Shares the forward activations between the objective value, the
    accuracy-ready probabilities, and the gradient, so training loops pay
    for a single pass per step.
    """
    batch = len(np.asarray(inputs))
    if batch == 0:
        raise ValueError("empty batch")
    scale = 1.0 if n_total is None else n_total / batch
    probs, caches = forward_with_cache(net, particle, inputs)
    grad = _likelihood_grads(net, particle, probs, caches, labels)
    value = scale * -cross_entropy(probs, labels)
    for spec, lp, gp in zip(net.layers, particle.layers, grad.layers):
        d = spec.shape.order
        value += priors.log_prior(lp.cores, lp.rank_scales, prior, extras=[lp.bias])
        for k, core in enumerate(lp.cores):
            left = lp.rank_scales[k - 1] if k > 0 else None
            right = lp.rank_scales[k] if k < d - 1 else None
            gp.cores[k] = scale * gp.cores[k] + priors.grad_log_prior_core(
                core, left, right, _core_position(k, d)
            )
        gp.rank_scales = [
            priors.grad_log_prior_scales(k, lp.cores, lp.rank_scales, prior)
            for k in range(d - 1)
        ]
        gp.bias = scale * gp.bias + priors.grad_weak_prior(lp.bias, prior)
    return value, probs, grad


def grad_log_posterior(
    net: Network,
    particle: Particle,
    prior: PriorConfig,
    inputs,
    labels,
    n_total: int | None = None,
) -> Particle:
    """Gradient of :func:`log_posterior`, structured like the particle."""
    _, _, grad = posterior_value_and_grad(net, particle, prior, inputs, labels, n_total)
    return grad
