"""Experiment configuration: flat ``key = value`` text files.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys, bad values, and inconsistent architectures are all collected
and reported together in one ConfigError.  Every hyperparameter has a
default matching the reference two-layer 784 -> 625 -> 10 experiment
(TT factorizations (7,4,7,4)x(5,5,5,5) and (25,25)x(5,2), max rank 20,
Gamma(1, 5) rank-scale prior, N(0, 100) on biases, 50 particles).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, load_idx, make_toy
from .model import LayerSpec, Network
from .priors import PriorConfig
from .tt import TTShapeError

__all__ = [
    "ConfigError",
    "LayerConfig",
    "ExperimentConfig",
    "parse_kv_text",
    "load_config",
    "config_from_text",
    "DEFAULT_CONFIG_TEXT",
]


class ConfigError(ValueError):
    """All configuration problems, reported at once."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class LayerConfig:
    rows: tuple[int, ...]
    cols: tuple[int, ...]
    rank: int
    activation: str


DEFAULT_LAYERS = (
    LayerConfig((7, 4, 7, 4), (5, 5, 5, 5), 20, "relu"),
    LayerConfig((25, 25), (5, 2), 20, "softmax"),
)

DEFAULT_CONFIG_TEXT = """\
# ttbayes experiment configuration (defaults shown)
seed = 0
trainer = map              # map | svgd
iterations = 5000
batch_size = 100
step_size = 0.001
optimizer = adam           # map only: adam | sgd
particles = 50             # svgd ensemble size
warm_start_iterations = 0  # adam steps to position the first particle (svgd)
bandwidth = median         # median | fixed:<h>
tau_rel = 0.01
tau_abs = 1e-5

prior.gamma_shape = 1.0
prior.gamma_rate = 5.0
prior.weak_variance = 100.0

layer1.rows = 7,4,7,4
layer1.cols = 5,5,5,5
layer1.rank = 20
layer1.activation = relu
layer2.rows = 25,25
layer2.cols = 5,2
layer2.rank = 20
layer2.activation = softmax

data.source = idx          # idx | two_gaussians | xor
data.train_images = train-images-idx3-ubyte
data.train_labels = train-labels-idx1-ubyte
data.test_images = t10k-images-idx3-ubyte
data.test_labels = t10k-labels-idx1-ubyte
# data.limit = 2000        # optional cap on training samples
# data.count = 1000        # toy sources: train size
# data.test_count = 200    # toy sources: test size
"""


@dataclass
class ExperimentConfig:
    layers: tuple[LayerConfig, ...] = DEFAULT_LAYERS
    prior: PriorConfig = field(default_factory=PriorConfig)
    trainer: str = "map"
    iterations: int = 5000
    batch_size: int = 100
    step_size: float = 1e-3
    optimizer: str = "adam"
    particles: int = 50
    warm_start_iterations: int = 0
    bandwidth: float | None = None  # None -> median heuristic
    tau_rel: float = 0.01
    tau_abs: float = 1e-5
    data_source: str = "idx"
    data_paths: dict = field(default_factory=dict)
    data_limit: int | None = None
    data_count: int = 1000
    data_test_count: int = 200
    seed: int = 0

    def build_network(self) -> Network:
        specs = tuple(
            LayerSpec.uniform_rank(lc.rows, lc.cols, lc.rank, lc.activation)
            for lc in self.layers
        )
        return Network(specs)

    def load_dataset(self, split: str) -> Dataset:
        if self.data_source == "idx":
            key_img = "train_images" if split == "train" else "test_images"
            key_lab = "train_labels" if split == "train" else "test_labels"
            ds = load_idx(self.data_paths[key_img], self.data_paths[key_lab], split=split)
        else:
            count = self.data_count if split == "train" else self.data_test_count
            seed = self.seed if split == "train" else self.seed + 1
            ds = make_toy(self.data_source, count, seed=seed)
            ds.split = split
        if split == "train" and self.data_limit is not None:
            ds = ds.take(np.arange(min(self.data_limit, len(ds))))
        return ds


def parse_kv_text(text: str) -> dict[str, str]:
    """Flat key = value parser; later assignments win; comments stripped."""
    out: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return out


def _parse_int_tuple(value: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in value.split(",") if p.strip())


def config_from_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    kv = parse_kv_text(text)
    if overrides:
        kv.update({k: str(v) for k, v in overrides.items() if v is not None})
    problems: list[str] = []

    def take(key, default, conv=str, check=None, describe=""):
        raw = kv.pop(key, None)
        if raw is None:
            return default
        try:
            value = conv(raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r}{describe}")
            return default
        if check is not None and not check(value):
            problems.append(f"{key}: invalid value {raw!r}{describe}")
            return default
        return value

    seed = take("seed", 0, int)
    trainer = take("trainer", "map", str, lambda v: v in ("map", "svgd"), " (map or svgd)")
    iterations = take("iterations", 5000, int, lambda v: v >= 0)
    batch_size = take("batch_size", 100, int, lambda v: v >= 1)
    step_size = take("step_size", 1e-3, float, lambda v: v > 0)
    optimizer = take("optimizer", "adam", str, lambda v: v in ("adam", "sgd"), " (adam or sgd)")
    particles = take("particles", 50, int, lambda v: v >= 1)
    warm_start = take("warm_start_iterations", 0, int, lambda v: v >= 0)
    tau_rel = take("tau_rel", 0.01, float, lambda v: v >= 0)
    tau_abs = take("tau_abs", 1e-5, float, lambda v: v >= 0)

    bw_raw = kv.pop("bandwidth", "median")
    bandwidth: float | None
    if bw_raw == "median":
        bandwidth = None
    elif bw_raw.startswith("fixed:"):
        try:
            bandwidth = float(bw_raw.split(":", 1)[1])
            if bandwidth <= 0:
                problems.append(f"bandwidth: fixed value must be positive, got {bw_raw!r}")
        except ValueError:
            problems.append(f"bandwidth: cannot parse {bw_raw!r}")
            bandwidth = None
    else:
        problems.append(f"bandwidth: expected 'median' or 'fixed:<h>', got {bw_raw!r}")
        bandwidth = None

    gamma_shape = take("prior.gamma_shape", 1.0, float, lambda v: v > 0)
    gamma_rate = take("prior.gamma_rate", 5.0, float, lambda v: v > 0)
    weak_variance = take("prior.weak_variance", 100.0, float, lambda v: v > 0)

    layer_keys = sorted(
        {m.group(1) for k in kv if (m := re.match(r"(layer(\d+))\.", k))},
        key=lambda name: int(name[5:]),
    )
    layers: tuple[LayerConfig, ...]
    if not layer_keys:
        layers = DEFAULT_LAYERS
    else:
        expected = [f"layer{i}" for i in range(1, len(layer_keys) + 1)]
        if layer_keys != expected:
            problems.append(
                f"layers must be numbered 1..{len(layer_keys)} without gaps, got {layer_keys}"
            )
        built = []
        for name in layer_keys:
            rows = take(f"{name}.rows", None, _parse_int_tuple)
            cols = take(f"{name}.cols", None, _parse_int_tuple)
            rank = take(f"{name}.rank", 20, int, lambda v: v >= 1)
            act = take(
                f"{name}.activation",
                None,
                str,
                lambda v: v in ("relu", "identity", "softmax"),
            )
            if rows is None or cols is None:
                problems.append(f"{name}: both .rows and .cols are required")
                continue
            if act is None:
                act = "softmax" if name == layer_keys[-1] else "relu"
            built.append(LayerConfig(rows, cols, rank, act))
        layers = tuple(built) if built else DEFAULT_LAYERS

    data_source = take(
        "data.source", "idx", str, lambda v: v in ("idx", "two_gaussians", "xor")
    )
    data_paths = {
        "train_images": kv.pop("data.train_images", None),
        "train_labels": kv.pop("data.train_labels", None),
        "test_images": kv.pop("data.test_images", None),
        "test_labels": kv.pop("data.test_labels", None),
    }
    if data_source == "idx":
        for name, path in data_paths.items():
            if path is None:
                problems.append(f"data.{name}: required when data.source = idx")
    limit_raw = kv.pop("data.limit", None)
    data_limit = None
    if limit_raw is not None:
        try:
            data_limit = int(limit_raw)
            if data_limit < 1:
                problems.append(f"data.limit: must be >= 1, got {limit_raw!r}")
        except ValueError:
            problems.append(f"data.limit: cannot parse {limit_raw!r}")
    data_count = take("data.count", 1000, int, lambda v: v >= 4)
    data_test_count = take("data.test_count", 200, int, lambda v: v >= 4)

    for key in sorted(kv):
        problems.append(f"unknown key {key!r}")

    cfg = ExperimentConfig(
        layers=layers,
        prior=PriorConfig(gamma_shape, gamma_rate, weak_variance),
        trainer=trainer,
        iterations=iterations,
        batch_size=batch_size,
        step_size=step_size,
        optimizer=optimizer,
        particles=particles,
        warm_start_iterations=warm_start,
        bandwidth=bandwidth,
        tau_rel=tau_rel,
        tau_abs=tau_abs,
        data_source=data_source,
        data_paths=data_paths,
        data_limit=data_limit,
        data_count=data_count,
        data_test_count=data_test_count,
        seed=seed,
    )

    # architecture-level consistency checks
    try:
        net = cfg.build_network()
        if cfg.data_source != "idx":
            if net.input_dim != 2:
                problems.append(
                    f"layer1 input dim {net.input_dim} does not match toy input dim 2"
                )
            if net.class_count != 2:
                problems.append(
                    f"final layer output dim {net.class_count} does not match toy class count 2"
                )
    except (TTShapeError, ValueError) as err:
        problems.append(f"architecture: {err}")

    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_text(f.read(), overrides)
