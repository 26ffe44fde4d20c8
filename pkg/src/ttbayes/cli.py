"""Command-line interface: train, evaluate, compress, predict, inspect.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  With ``--threads 1`` every command is bitwise reproducible for a
fixed seed.
"""

from __future__ import annotations

import csv
import functools
import sys

import click
import numpy as np

from . import inference, pruning
from .archive import Archive, ArchiveError, read_archive, write_archive
from .config import ConfigError, load_config
from .data import DataError, Dataset
from .model import NumericError, init_particle
from .tt import TTShapeError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _limit_threads(n: int | None):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _translating_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as err:
            click.echo(str(err), err=True)
            sys.exit(EXIT_CONFIG)
        except (DataError, ArchiveError, FileNotFoundError) as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(EXIT_DATA)
        except NumericError as err:
            click.echo(f"numeric failure: {err}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (TTShapeError, ValueError) as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper


@click.group()
def cli():
    """Train and compress low-rank Bayesian tensorized classifiers."""


def _write_trace(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "log_posterior", "accuracy"])
        for row in trace:
            writer.writerow([row.iteration, repr(row.log_posterior), repr(row.accuracy)])


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=None, help="BLAS thread cap; 1 = bitwise reproducible.")
@click.option("--particles", type=int, default=None, help="Override the ensemble size (svgd).")
@click.option("--iterations", type=int, default=None, help="Override the iteration count.")
@click.option("--out", "out_path", type=click.Path(), default="model.ttb", show_default=True)
@click.option("--metrics", "metrics_path", type=click.Path(), default=None,
              help="Trace CSV path (default: <out>.metrics.csv).")
@_translating_errors
def train(config_path, seed, threads, particles, iterations, out_path, metrics_path):
    """Train a model per the config and write an archive plus a metrics trace."""
    overrides = {"seed": seed, "particles": particles, "iterations": iterations}
    cfg = load_config(config_path, overrides)
    net = cfg.build_network()
    train_set = cfg.load_dataset("train")
    if net.input_dim != train_set.dim:
        raise TTShapeError(
            f"network input dim {net.input_dim} != dataset dim {train_set.dim}"
        )
    metadata = {
        "seed": cfg.seed,
        "trainer": cfg.trainer,
        "iterations": cfg.iterations,
        "tau_rel": cfg.tau_rel,
        "tau_abs": cfg.tau_abs,
    }
    with _limit_threads(threads) or _null_ctx():
        first = init_particle(net, cfg.prior, seed=cfg.seed)
        try:
            if cfg.trainer == "map":
                map_cfg = inference.MAPConfig(
                    step_size=cfg.step_size,
                    iterations=cfg.iterations,
                    batch_size=cfg.batch_size,
                    optimizer=cfg.optimizer,
                    seed=cfg.seed,
                )
                trained, trace = inference.map_train(first, net, cfg.prior, train_set, map_cfg)
                particles_out = [trained]
            else:
                if cfg.warm_start_iterations > 0:
                    warm_cfg = inference.MAPConfig(
                        step_size=cfg.step_size,
                        iterations=cfg.warm_start_iterations,
                        batch_size=cfg.batch_size,
                        optimizer="adam",
                        seed=cfg.seed,
                    )
                    first, _ = inference.map_train(first, net, cfg.prior, train_set, warm_cfg)
                ensemble = inference.perturbed_ensemble(
                    first, net, cfg.particles, seed=cfg.seed + 1
                )
                svgd_cfg = inference.SVGDConfig(
                    step_size=cfg.step_size,
                    iterations=cfg.iterations,
                    batch_size=cfg.batch_size,
                    bandwidth=cfg.bandwidth,
                    seed=cfg.seed,
                )
                particles_out, trace = inference.svgd_train(
                    ensemble, net, cfg.prior, train_set, svgd_cfg
                )
        except NumericError as err:
            if err.last_good is not None:
                last = err.last_good if isinstance(err.last_good, list) else [err.last_good]
                metadata["aborted_at_iteration"] = err.iteration
                write_archive(out_path, Archive(net, last, cfg.prior, metadata))
                click.echo(f"checkpoint retained at {out_path}", err=True)
            raise
    write_archive(out_path, Archive(net, particles_out, cfg.prior, metadata))
    _write_trace(metrics_path or out_path + ".metrics.csv", trace)
    click.echo(f"trained {cfg.trainer} model -> {out_path} ({len(particles_out)} particle(s))")


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _load_eval_data(cfg_path, images, labels):
    if images and labels:
        from .data import load_idx

        return load_idx(images, labels, split="test")
    if cfg_path is None:
        raise ConfigError(["evaluate needs --config or both --images and --labels"])
    return load_config(cfg_path).load_dataset("test")


@cli.command()
@click.option("--archive", "archive_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--images", type=click.Path(exists=True), default=None, help="IDX test images.")
@click.option("--labels", type=click.Path(exists=True), default=None, help="IDX test labels.")
@click.option("--threads", type=int, default=None)
@_translating_errors
def evaluate(archive_path, config_path, images, labels, threads):
    """Report accuracy and predictive test log-likelihood on held-out data."""
    arc = read_archive(archive_path)
    test_set = _load_eval_data(config_path, images, labels)
    if len(test_set) == 0:
        raise ConfigError(["test set is empty"])
    if arc.net.input_dim != test_set.dim:
        raise TTShapeError(
            f"archive input dim {arc.net.input_dim} != dataset dim {test_set.dim}"
        )
    with _limit_threads(threads) or _null_ctx():
        mean_probs, _ = inference.predictive_distribution(
            arc.particles, arc.net, test_set.inputs
        )
        from .model import accuracy

        acc = accuracy(mean_probs, test_set.labels)
        tll = inference.test_log_likelihood(arc.particles, arc.net, test_set)
    click.echo(f"particles: {arc.particle_count}")
    click.echo(f"accuracy: {acc:.6f}")
    click.echo(f"test_log_likelihood: {tll:.6f}")


@cli.command()
@click.option("--archive", "archive_path", required=True, type=click.Path(exists=True))
@click.option("--tau-rel", type=float, default=0.01, show_default=True)
@click.option("--tau-abs", type=float, default=1e-5, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default="model.pruned.ttb", show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Write the machine-readable key=value report here.")
@click.option("--float32", is_flag=True, help="Store the pruned archive in float32.")
@_translating_errors
def compress(archive_path, tau_rel, tau_abs, out_path, report_path, float32):
    """Estimate ranks from the posterior-mean rank scales and prune the model."""
    arc = read_archive(archive_path)
    policy = pruning.ThresholdPolicy(tau_rel, tau_abs)
    mean_scales = pruning.posterior_mean_rank_scales(arc.particles)
    estimates = pruning.estimate_ranks(mean_scales, policy)
    probe = np.random.default_rng(0).standard_normal((16, arc.net.input_dim))
    new_net, new_particles, report = pruning.prune_model(
        arc.net, arc.particles, estimates, policy, probe_inputs=probe
    )
    metadata = dict(arc.metadata)
    metadata.update({"tau_rel": tau_rel, "tau_abs": tau_abs, "pruned_from": archive_path})
    write_archive(
        out_path,
        Archive(new_net, new_particles, arc.prior, metadata),
        dtype="f4" if float32 else "f8",
    )
    click.echo(report.as_text())
    click.echo(f"pruned archive -> {out_path}")
    if report_path:
        with open(report_path, "w") as f:
            for key, value in report.as_dict().items():
                f.write(f"{key} = {value}\n")


@cli.command()
@click.option("--archive", "archive_path", required=True, type=click.Path(exists=True))
@click.option("--npy", "npy_path", type=click.Path(exists=True), default=None,
              help="A .npy file with one input vector or a (k, dim) batch.")
@click.option("--index", type=int, default=None, help="Row of the config's test set.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the per-particle probability table as CSV.")
@_translating_errors
def predict(archive_path, npy_path, index, config_path, out_path):
    """Per-class mean probabilities plus the per-particle spread for one input."""
    arc = read_archive(archive_path)
    if npy_path is not None:
        x = np.atleast_2d(np.load(npy_path))
    elif index is not None:
        if config_path is None:
            raise ConfigError(["predict --index needs --config for the test set"])
        test_set = load_config(config_path).load_dataset("test")
        if not (0 <= index < len(test_set)):
            raise ConfigError([f"--index {index} out of range [0, {len(test_set)})"])
        x = test_set.inputs[index : index + 1]
    else:
        raise ConfigError(["predict needs --npy or --index"])
    if x.shape[1] != arc.net.input_dim:
        raise TTShapeError(f"input dim {x.shape[1]} != model dim {arc.net.input_dim}")
    mean_probs, per_particle = inference.predictive_distribution(arc.particles, arc.net, x)
    click.echo("class,mean_probability,std_across_particles")
    stds = per_particle[:, 0, :].std(axis=0)
    for s, (p, sd) in enumerate(zip(mean_probs[0], stds)):
        click.echo(f"{s},{p:.6e},{sd:.6e}")
    if out_path:
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["particle"] + [f"class{s}" for s in range(arc.net.class_count)])
            for i, row in enumerate(per_particle[:, 0, :]):
                writer.writerow([i] + [repr(v) for v in row])
        click.echo(f"per-particle table -> {out_path}")


def _scale_histogram(vec, width: int = 40) -> list[str]:
    top = float(np.max(vec))
    lines = []
    for i, v in enumerate(vec):
        bar = "#" * max(1, int(round(width * v / top))) if top > 0 else ""
        lines.append(f"    [{i:3d}] {v:10.4e} {bar}")
    return lines


@cli.command()
@click.option("--archive", "archive_path", required=True, type=click.Path(exists=True))
@_translating_errors
def inspect(archive_path):
    """Print ranks, parameter counts, and rank-scale histograms of an archive."""
    arc = read_archive(archive_path)
    from .tt import tt_param_count

    click.echo(f"particles: {arc.particle_count}")
    click.echo(f"metadata: {arc.metadata}")
    mean_scales = pruning.posterior_mean_rank_scales(arc.particles)
    total = 0
    for i, spec in enumerate(arc.net.layers):
        count = tt_param_count(spec.shape, spec.ranks)
        total += count + spec.output_dim
        click.echo(
            f"layer {i + 1}: {spec.shape.row_factors} x {spec.shape.col_factors} "
            f"ranks {spec.ranks} activation {spec.activation}"
        )
        click.echo(f"  TT params: {count}, bias params: {spec.output_dim}, "
                   f"dense equivalent: {spec.input_dim * spec.output_dim}")
        for k, vec in enumerate(mean_scales[i]):
            click.echo(f"  mean rank scales, internal rank {k + 1}:")
            for line in _scale_histogram(vec):
                click.echo(line)
    click.echo(f"total params per particle: {total}")


def main():
    cli(standalone_mode=True)


if __name__ == "__main__":
    main()
