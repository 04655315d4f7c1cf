#!/bin/env python

import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import click
from icecream import ic
from pydantic import ValidationError

from src.conformal_missing.cli_io import (
    ConfigError,
    RuntimeSettings,
    emit_results,
    load_csv_dataset,
    load_experiment_config,
    load_runtime_settings,
    read_results,
    read_synthetic_repetitions,
    save_experiment_config,
    to_results_rows,
    write_synthetic_repetitions,
)
from src.conformal_missing.data_model import MaskedDataset
from src.conformal_missing.evaluation import (
    ExperimentConfig,
    aggregate_results,
    draw_synthetic_repetition,
    run_experiment,
)
from src.conformal_missing.gaussian_oracle import oracle_length
from src.conformal_missing.missingness import enumerate_masks

ic.configureOutput(includeContext=True)

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
CONFIG_FILE = "config.env"
SUMMARY_FILE = "summary.csv"


def _settings(ctx: click.Context) -> RuntimeSettings:
    settings: RuntimeSettings = ctx.obj
    return settings


def _with_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int],
    methods: Optional[str],
    alpha: Optional[float],
) -> ExperimentConfig:
    raw: dict[str, Any] = cfg.model_dump()
    if seed is not None:
        raw["seed"] = seed
    if methods is not None:
        raw["methods"] = [m.strip() for m in methods.split(",") if m.strip()]
    if alpha is not None:
        raw["alpha"] = alpha
    return ExperimentConfig.model_validate(raw, strict=False)


def _load_config(
    path: Path,
    seed: Optional[int] = None,
    methods: Optional[str] = None,
    alpha: Optional[float] = None,
) -> ExperimentConfig:
    cfg = _with_overrides(load_experiment_config(path), seed, methods, alpha)
    ic(cfg)
    return cfg


@click.group()
@click.pass_context
def cli(ctx: click.Context) -> None:
    """Conformal prediction intervals with missing covariates."""
    settings = load_runtime_settings()
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if not settings.debug:
        ic.disable()
    ctx.obj = settings


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="Experiment config (KEY=value document).",
)
seed_option = click.option("--seed", type=int, default=None, help="Override the base seed.")


@cli.command("synth-gen")
@config_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.pass_context
def synth_gen(ctx: click.Context, config_path: Path, seed: Optional[int], out: Path) -> None:
    """Draw the synthetic repetitions of a generator config and write them as CSV."""
    cfg = _load_config(config_path, seed)
    if cfg.generator is None:
        raise ConfigError("synth-gen needs a GENERATOR_* config")
    reps = [draw_synthetic_repetition(cfg, r) for r in range(cfg.repetitions)]
    written = write_synthetic_repetitions(reps, out)
    save_experiment_config(cfg, out / CONFIG_FILE)
    click.echo(f"wrote {len(written)} repetitions to {out}")


@cli.command()
@config_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--methods", default=None, help="Comma-separated method names.")
@click.option("--alpha", type=float, default=None, help="Override the miscoverage level.")
@click.option(
    "--data-dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    default=None,
    help="Use repetitions written by synth-gen instead of drawing them.",
)
@click.pass_context
def run(
    ctx: click.Context,
    config_path: Path,
    seed: Optional[int],
    out: Path,
    methods: Optional[str],
    alpha: Optional[float],
    data_dir: Optional[Path],
) -> None:
    """Run an experiment and write per-group coverage rows."""
    settings = _settings(ctx)
    cfg = _load_config(config_path, seed, methods, alpha)
    dataset: Optional[MaskedDataset] = None
    if cfg.dataset is not None:
        dataset = load_csv_dataset(cfg.dataset.path, cfg.dataset.target, cfg.dataset.na_tokens)
    repetitions = None
    if data_dir is not None:
        repetitions = read_synthetic_repetitions(data_dir, cfg.repetitions)

    reports = run_experiment(
        cfg,
        repetitions=repetitions,
        dataset=dataset,
        n_jobs=settings.n_jobs,
        progress=settings.progress,
    )
    rows = to_results_rows(reports)
    emit_results(rows, out / RESULTS_FILE)
    save_experiment_config(cfg, out / CONFIG_FILE)
    click.echo(f"wrote {len(rows)} rows to {out / RESULTS_FILE}")


@cli.command()
@click.option(
    "--results",
    "results_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
def report(results_path: Path, out: Optional[Path]) -> None:
    """Aggregate a results file across repetitions."""
    summary = aggregate_results(read_results(results_path))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out / SUMMARY_FILE, index=False, float_format="%.6g")
    click.echo(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


@cli.command()
@config_option
@click.option("--alpha", type=float, default=None, help="Override the miscoverage level.")
def oracle(config_path: Path, alpha: Optional[float]) -> None:
    """Print the oracle interval length of every mask of the configured generator."""
    cfg = _load_config(config_path, alpha=alpha)
    if cfg.generator is None:
        raise ConfigError("the oracle needs a GENERATOR_* config")
    params = cfg.generator.params()
    click.echo("mask,oracle_length")
    for m in enumerate_masks(params.dimension, include_all_missing=True):
        click.echo(f"{m.key},{oracle_length(params, m, cfg.alpha):.6f}")


def main(args: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; 0 on success, 1 on invalid input, 2 on runtime failure."""
    try:
        rv = cli.main(args=list(args) if args is not None else None, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except (ValueError, ValidationError) as exc:
        click.echo(f"Error: {exc}", err=True)
        return 1
    except Exception as exc:
        logger.exception("run failed")
        click.echo(f"Error: {exc}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
