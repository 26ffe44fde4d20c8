"""Automatic rank determination and model truncation.

After training, each internal TT rank's posterior-mean scale vector tells
which rank slices are alive.  Entries below a threshold (relative to the
per-vector maximum, with an absolute floor) are treated as zero; the
surviving index sets truncate the cores of every particle identically,
producing a smaller structurally homogeneous model plus a report of the
parameter savings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tt
from .model import LayerParams, LayerSpec, Network, Particle

__all__ = [
    "ThresholdPolicy",
    "RankEstimate",
    "LayerReport",
    "PruneReport",
    "posterior_mean_rank_scales",
    "estimate_ranks",
    "prune_model",
]


@dataclass(frozen=True)
class ThresholdPolicy:
    """Keep scale entries >= max(tau_rel * max(vector), tau_abs)."""

    tau_rel: float = 0.01
    tau_abs: float = 1e-5

    def __post_init__(self):
        if self.tau_rel < 0 or self.tau_abs < 0:
            raise ValueError("thresholds must be nonnegative")


@dataclass
class RankEstimate:
    """Per-layer inferred ranks and the keep-index sets realizing them."""

    ranks: tuple[int, ...]
    keep: list[np.ndarray]  # one sorted 0-based index array per internal rank


@dataclass
class LayerReport:
    ranks_before: tuple[int, ...]
    ranks_after: tuple[int, ...]
    params_before: int
    params_after: int
    dense_params: int


@dataclass
class PruneReport:
    layers: list[LayerReport]
    policy: ThresholdPolicy
    max_output_deviation: float | None = None

    @property
    def params_before(self) -> int:
        return sum(l.params_before for l in self.layers)

    @property
    def params_after(self) -> int:
        return sum(l.params_after for l in self.layers)

    @property
    def dense_params(self) -> int:
        return sum(l.dense_params for l in self.layers)

    @property
    def ratio_vs_unpruned(self) -> float:
        return self.params_before / self.params_after

    @property
    def ratio_vs_dense(self) -> float:
        return self.dense_params / self.params_after

    def as_dict(self) -> dict:
        out = {
            "tau_rel": self.policy.tau_rel,
            "tau_abs": self.policy.tau_abs,
            "tt_params_before": self.params_before,
            "tt_params_after": self.params_after,
            "dense_params": self.dense_params,
            "ratio_vs_unpruned": self.ratio_vs_unpruned,
            "ratio_vs_dense": self.ratio_vs_dense,
        }
        if self.max_output_deviation is not None:
            out["max_output_deviation"] = self.max_output_deviation
        for i, layer in enumerate(self.layers, start=1):
            out[f"layer{i}.ranks_before"] = ",".join(map(str, layer.ranks_before))
            out[f"layer{i}.ranks_after"] = ",".join(map(str, layer.ranks_after))
            out[f"layer{i}.tt_params_before"] = layer.params_before
            out[f"layer{i}.tt_params_after"] = layer.params_after
        return out

    def as_text(self) -> str:
        lines = [
            f"threshold: tau_rel={self.policy.tau_rel} tau_abs={self.policy.tau_abs}"
        ]
        for i, layer in enumerate(self.layers, start=1):
            lines.append(
                f"layer {i}: ranks {layer.ranks_before} -> {layer.ranks_after}, "
                f"TT params {layer.params_before} -> {layer.params_after} "
                f"(dense {layer.dense_params})"
            )
        lines.append(
            f"total TT params: {self.params_before} -> {self.params_after} "
            f"({self.ratio_vs_unpruned:.2f}x vs unpruned TT, "
            f"{self.ratio_vs_dense:.2f}x vs dense)"
        )
        if self.max_output_deviation is not None:
            lines.append(
                f"max probe output deviation: {self.max_output_deviation:.3e}"
            )
        return "\n".join(lines)


def posterior_mean_rank_scales(particles: list[Particle]) -> list[list[np.ndarray]]:
    """Componentwise mean of the rank-scale vectors over particles, per layer."""
    if not particles:
        raise ValueError("need at least one particle")
    out = []
    for li in range(len(particles[0].layers)):
        vecs = []
        for k in range(len(particles[0].layers[li].rank_scales)):
            stacked = np.stack([p.layers[li].rank_scales[k] for p in particles])
            vecs.append(stacked.mean(axis=0))
        out.append(vecs)
    return out


def estimate_ranks(mean_scales: list[list[np.ndarray]], policy: ThresholdPolicy) -> list[RankEstimate]:
    """Threshold the mean scale vectors into keep-index sets, one estimate per layer.

    At least one index per internal rank survives (the argmax), so a rank
    never drops to zero.
    """
    estimates = []
    for layer_vecs in mean_scales:
        keep = []
        for vec in layer_vecs:
            vec = np.asarray(vec, dtype=np.float64)
            tau = max(policy.tau_rel * float(vec.max()), policy.tau_abs)
            idx = np.flatnonzero(vec >= tau)
            if idx.size == 0:
                idx = np.array([int(np.argmax(vec))])
            keep.append(idx)
        ranks = (1,) + tuple(len(i) for i in keep) + (1,)
        estimates.append(RankEstimate(ranks, keep))
    return estimates


def _prune_layer_params(lp: LayerParams, est: RankEstimate) -> LayerParams:
    ttm = tt.TTMatrix([c.copy() for c in lp.cores])
    pruned = tt.tt_truncate(ttm, est.keep)
    scales = [lp.rank_scales[k][est.keep[k]].copy() for k in range(len(est.keep))]
    return LayerParams(pruned.cores, scales, lp.bias.copy())


def prune_model(
    net: Network,
    particles: list[Particle],
    estimates: list[RankEstimate],
    policy: ThresholdPolicy,
    probe_inputs: np.ndarray | None = None,
):
    """Apply the rank estimates to every particle; returns (net, particles, report).

    All particles are truncated with the same keep-sets so the pruned
    ensemble stays structurally homogeneous.  With ``probe_inputs`` given,
    the report includes the max absolute change of the ensemble-mean
    forward outputs on that batch.
    """
    if len(estimates) != len(net.layers):
        raise ValueError(f"expected {len(net.layers)} rank estimates, got {len(estimates)}")
    new_specs = []
    reports = []
    for spec, est in zip(net.layers, estimates):
        new_spec = LayerSpec(spec.shape, est.ranks, spec.activation)
        new_specs.append(new_spec)
        reports.append(
            LayerReport(
                ranks_before=spec.ranks,
                ranks_after=est.ranks,
                params_before=tt.tt_param_count(spec.shape, spec.ranks),
                params_after=tt.tt_param_count(spec.shape, est.ranks),
                dense_params=spec.input_dim * spec.output_dim,
            )
        )
    new_net = Network(tuple(new_specs))
    new_particles = [
        Particle([_prune_layer_params(lp, est) for lp, est in zip(p.layers, estimates)])
        for p in particles
    ]
    report = PruneReport(reports, policy)
    if probe_inputs is not None:
        from .inference import predictive_distribution

        before, _ = predictive_distribution(particles, net, probe_inputs)
        after, _ = predictive_distribution(new_particles, new_net, probe_inputs)
        report.max_output_deviation = float(np.max(np.abs(before - after)))
    return new_net, new_particles, report
