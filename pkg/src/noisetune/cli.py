"""``noisetune`` command line.

Worker count precedence: ``--workers`` flag, then the ``TNT_WORKERS``
environment variable, then ``workers`` in the config file, then 1. Every
other flag likewise overrides the matching config-file value.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace
from functools import wraps

import click

from .data import DatasetSpec, make_synthetic_shift_dataset, save_dataset
from .exceptions import ConfigError
from .harness import VARIANT_NAMES, ExperimentConfig, gradcheck, metrics_from_csv, run_ablation, run_experiment

EXIT_CONFIG = 2
EXIT_IO = 3


def _handle_errors(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except OSError as exc:
            click.echo(f"io error: {exc}", err=True)
            sys.exit(EXIT_IO)
    return wrapper


def _resolve_workers(flag: int | None, config_value: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("TNT_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TNT_WORKERS must be an integer, got {env!r}") from None
    return config_value


def _build_config(config_path, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(config_path) if config_path else ExperimentConfig()
    workers = _resolve_workers(overrides.pop("workers"), cfg.workers)
    adapt = {k: overrides.pop(k) for k in ("steps", "n_views") if k in overrides}
    adapt = {k: v for k, v in adapt.items() if v is not None}
    data = {k: overrides.pop(k) for k in ("n_samples",) if k in overrides}
    data = {k: v for k, v in data.items() if v is not None}
    fields = {k: v for k, v in overrides.items() if v is not None}
    try:
        if adapt:
            fields["adaptation"] = replace(cfg.adaptation, **adapt)
        if data:
            fields["dataset"] = replace(cfg.dataset, **data)
        return replace(cfg, workers=workers, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _run_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON experiment config; unknown keys are rejected."),
        click.option("--seed", type=int, help="Master seed."),
        click.option("--output", type=click.Path(file_okay=False), help="Output directory."),
        click.option("--workers", type=int, help="Worker processes (overrides TNT_WORKERS)."),
        click.option("--steps", type=int, help="Noise update steps per sample."),
        click.option("--n-views", type=int, help="Augmented views per sample."),
        click.option("--n-samples", type=int, help="Synthetic dataset size."),
        click.option("--split", type=click.Choice(["shifted", "unshifted", "templates"])),
        click.option("--dataset-path", type=click.Path(exists=True, file_okay=False)),
        click.option("--model-path", type=click.Path(exists=True, file_okay=False)),
        click.option("--class-embeddings-path", type=click.Path(exists=True, dir_okay=False)),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Test-time noise tuning experiments on a frozen toy dual encoder."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON object with dataset spec keys.")
@click.option("--n-classes", type=int)
@click.option("--n-samples", type=int)
@click.option("--pixel-noise-std", type=float)
@click.option("--brightness", type=float)
@click.option("--contrast", type=float)
@click.option("--structure-amplitude", type=float)
@click.option("--clean-radius", type=float)
@click.option("--unshifted", is_flag=True, help="Use the identity shift.")
@_handle_errors
def synth(out_dir, seed, config_path, unshifted, **overrides):
    """Write a synthetic dataset as .tnsr files plus a manifest."""
    spec = DatasetSpec()
    if config_path:
        with open(config_path) as fh:
            try:
                spec = DatasetSpec.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{config_path}: invalid JSON: {exc}") from exc
    values = {k: v for k, v in overrides.items() if v is not None}
    spec = replace(spec, **values)
    if unshifted:
        spec = spec.unshifted()
    ds = make_synthetic_shift_dataset(spec, seed=seed)
    save_dataset(ds, out_dir)
    click.echo(f"wrote {len(ds)} samples, {ds.n_classes} classes to {out_dir}")


@main.command()
@_run_options
@click.option("--variant", type=click.Choice(list(VARIANT_NAMES) + ["E+V+T′"]))
@_handle_errors
def run(config_path, **overrides):
    """Run a single experiment and print its aggregate report."""
    cfg = _build_config(config_path, **overrides)
    report = run_experiment(cfg)
    click.echo(json.dumps({k: v for k, v in report.to_dict().items() if k not in ("config", "calibration")},
                          indent=2, sort_keys=True))


@main.command()
@_run_options
@_handle_errors
def ablate(config_path, **overrides):
    """Run all five variants on the same data and print the comparison table."""
    cfg = _build_config(config_path, **overrides)
    table = run_ablation(cfg)
    click.echo(table.to_csv(), nl=False)


@main.command("gradcheck")
@click.option("--seeds", type=int, default=10, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Print the full report as JSON.")
def gradcheck_cmd(seeds, as_json):
    """Compare autodiff gradients against central finite differences."""
    report = gradcheck(n_seeds=seeds)
    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2))
    else:
        for name, err in {**report.op_errors, **report.path_errors}.items():
            tol = report.path_tolerance if name in report.path_errors else report.op_tolerance
            click.echo(f"{name:24s} {err:.3e}  {'ok' if err <= tol else 'FAIL'}")
        click.echo(f"{'clamp boundary mask':24s} {'ok' if report.clamp_mask_ok else 'FAIL'}")
        click.echo(f"{'PASS' if report.passed else 'FAIL'} in {report.duration_s:.1f}s")
    sys.exit(0 if report.passed else 1)


@main.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--n-bins", type=int, default=15, show_default=True)
@_handle_errors
def metrics(csv_path, n_bins):
    """Recompute top-1, ECE and mean entropies from a per-sample CSV."""
    click.echo(json.dumps(metrics_from_csv(csv_path, n_bins), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
