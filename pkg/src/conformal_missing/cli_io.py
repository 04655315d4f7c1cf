"""
File formats and settings behind the command line.

- Input datasets: UTF-8 CSV with a header row; cells equal to one of the
  NA tokens (default "", "NA", "NaN") are missing.
- Results: CSV with the fixed header of RESULTS_HEADER, floats at 6
  significant digits, rows sorted by (method, repetition, group).
- Experiment configs: one flat KEY=value document (dotenv syntax). Keys are
  METHODS, ALPHA, REPETITIONS, SEED and <SECTION>_<FIELD> for the sections
  GENERATOR, DATASET, SIZES, EVAL, MODEL and IMPUTER. Unknown keys are errors.
- Runtime settings come from the environment or a .env file.
"""

import csv
import logging
import os
import typing
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from environs import Env
from pydantic import BaseModel
from typeguard import typechecked

from .data_model import MaskedDataset, SplitIndices
from .evaluation import (
    DatasetConfig,
    EvalConfig,
    ExperimentConfig,
    GeneratorConfig,
    ImputerConfig,
    ModelConfig,
    RepetitionData,
    RepetitionReport,
    SizesConfig,
)
from .validation_helpers import ExtendedRealModel, StrictBaseModel

logger = logging.getLogger(__name__)

DEFAULT_NA_TOKENS = ("", "NA", "NaN")
RESULTS_HEADER = (
    "method",
    "repetition",
    "group",
    "n_test",
    "coverage",
    "mean_length",
    "infinite_fraction",
    "seed",
)
SPLIT_COLUMN = "split"
SYNTHETIC_TARGET = "y"
REPETITION_DIR = "rep_{:04d}"


class ConfigError(ValueError):
    pass


class CsvParseError(ValueError):
    def __init__(self, row: int, column: str, detail: str):
        super().__init__(f"row {row}, column {column!r}: {detail}")
        self.row = row
        self.column = column
        self.detail = detail

    def __reduce__(self) -> tuple[type, tuple[int, str, str]]:
        return (type(self), (self.row, self.column, self.detail))


class ResultsRow(ExtendedRealModel):
    method: str
    repetition: int
    group: str
    n_test: int
    coverage: float
    mean_length: float
    infinite_fraction: float
    seed: int

    def sort_key(self) -> tuple[str, int, str]:
        return (self.method, self.repetition, self.group)


class RuntimeSettings(StrictBaseModel):
    log_level: str = "WARNING"
    n_jobs: int = 1
    progress: bool = True
    debug: bool = False


@typechecked
def load_runtime_settings(env_file: str = ".env") -> RuntimeSettings:
    env = Env()
    if os.path.exists(env_file):
        env.read_env(env_file, override=True)
    return RuntimeSettings(
        log_level=env.str("CPMDA_LOG_LEVEL", "WARNING").upper(),
        n_jobs=env.int("CPMDA_N_JOBS", 1),
        progress=env.bool("CPMDA_PROGRESS", True),
        debug=env.bool("CPMDA_DEBUG", False),
    )


#
# Datasets
#


@typechecked
def load_csv_dataset(
    path: Path,
    target_column: str,
    na_tokens: Sequence[str] = DEFAULT_NA_TOKENS,
    exclude_columns: Sequence[str] = (),
) -> MaskedDataset:
    """
    Parse every non-target column as a numeric feature. Row numbers in
    errors count data rows from 0.
    """
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8"
    )
    if target_column not in frame.columns:
        raise ValueError(f"target column {target_column!r} not found in {path}")
    tokens = list(na_tokens)
    feature_cols = [
        c for c in frame.columns if c != target_column and c not in exclude_columns
    ]

    def parse(column: str) -> tuple[np.ndarray, np.ndarray]:  # type: ignore[type-arg]
        raw = frame[column].to_numpy(dtype=str)
        missing = np.isin(raw, tokens)
        filled = np.where(missing, "0", raw)
        try:
            # numpy parses with correct rounding, so written floats read back exactly
            values = filled.astype(np.float64)
        except ValueError:
            values = pd.to_numeric(pd.Series(filled), errors="coerce").to_numpy(dtype=np.float64)
        bad = ~missing & ~np.isfinite(values)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise CsvParseError(row, column, f"cannot parse {raw[row]!r} as a finite number")
        return np.where(missing, np.nan, values), missing

    y, y_missing = parse(target_column)
    if y_missing.any():
        row = int(np.flatnonzero(y_missing)[0])
        raise CsvParseError(row, target_column, "the target value is missing")

    n = len(frame)
    X = np.empty((n, len(feature_cols)))
    M = np.zeros((n, len(feature_cols)), dtype=bool)
    for j, column in enumerate(feature_cols):
        X[:, j], M[:, j] = parse(column)
    logger.info(
        f"loaded {n} rows x {len(feature_cols)} features from {path}, {M.mean() if M.size else 0.0:.1%} missing"
    )
    return MaskedDataset.build(X, M, y, feature_names=tuple(feature_cols))


def _feature_names(data: MaskedDataset) -> list[str]:
    if data.feature_names is not None:
        return list(data.feature_names)
    return [f"x{j}" for j in range(data.dimension)]


@typechecked
def write_csv_dataset(
    data: MaskedDataset, path: Path, target_column: str = SYNTHETIC_TARGET
) -> None:
    """
    Inverse of load_csv_dataset: missing cells become "NA" and floats are
    written with 17 significant digits, so values read back bit-identical.
    A dataset carrying a split gets an extra `split` column (train/cal).
    """
    frame = pd.DataFrame(np.where(data.masks, np.nan, data.features), columns=_feature_names(data))
    frame[target_column] = data.responses
    if data.split is not None:
        labels = np.full(data.size, "unused", dtype=object)
        labels[data.split.train_array()] = "train"
        labels[data.split.cal_array()] = "cal"
        frame[SPLIT_COLUMN] = labels
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="NA", float_format="%.17g", encoding="utf-8")


def _read_split(path: Path) -> SplitIndices:
    labels = pd.read_csv(path, usecols=[SPLIT_COLUMN], dtype=str)[SPLIT_COLUMN].to_numpy()
    return SplitIndices(
        train=tuple(int(i) for i in np.flatnonzero(labels == "train")),
        cal=tuple(int(i) for i in np.flatnonzero(labels == "cal")),
    )


@typechecked
def write_synthetic_repetitions(reps: Sequence[RepetitionData], out_dir: Path) -> list[Path]:
    """One directory per repetition with pool, marginal-test and conditional-test CSVs."""
    written = []
    for rep in reps:
        rep_dir = out_dir / REPETITION_DIR.format(rep.repetition)
        write_csv_dataset(rep.pool, rep_dir / "pool.csv")
        write_csv_dataset(rep.marginal_test, rep_dir / "marginal_test.csv")
        write_csv_dataset(rep.conditional_test, rep_dir / "conditional_test.csv")
        (rep_dir / "meta.env").write_text(
            f"REPETITION={rep.repetition}\nSEED={rep.seed}\n", encoding="utf-8"
        )
        written.append(rep_dir)
    return written


@typechecked
def read_synthetic_repetition(rep_dir: Path) -> RepetitionData:
    meta = dotenv_values(rep_dir / "meta.env")
    try:
        repetition, seed = int(meta["REPETITION"] or ""), int(meta["SEED"] or "")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{rep_dir / 'meta.env'} lacks a valid REPETITION or SEED") from exc
    pool_path = rep_dir / "pool.csv"
    pool = load_csv_dataset(pool_path, SYNTHETIC_TARGET, exclude_columns=(SPLIT_COLUMN,))
    return RepetitionData(
        repetition=repetition,
        seed=seed,
        pool=pool.with_split(_read_split(pool_path)),
        marginal_test=load_csv_dataset(rep_dir / "marginal_test.csv", SYNTHETIC_TARGET),
        conditional_test=load_csv_dataset(rep_dir / "conditional_test.csv", SYNTHETIC_TARGET),
    )


@typechecked
def read_synthetic_repetitions(data_dir: Path, count: int) -> list[RepetitionData]:
    reps = []
    for r in range(count):
        rep_dir = data_dir / REPETITION_DIR.format(r)
        if not rep_dir.is_dir():
            raise FileNotFoundError(f"missing repetition directory {rep_dir}")
        reps.append(read_synthetic_repetition(rep_dir))
    return reps


#
# Results
#


@typechecked
def to_results_rows(reports: Sequence[RepetitionReport]) -> list[ResultsRow]:
    return [
        ResultsRow(
            method=rep.method.value,
            repetition=rep.repetition,
            group=rec.group,
            n_test=rec.n_test,
            coverage=rec.coverage,
            mean_length=rec.mean_length,
            infinite_fraction=rec.infinite_fraction,
            seed=rep.seed,
        )
        for rep in reports
        for rec in rep.emitted_records()
    ]


def _fmt(value: float) -> str:
    return format(value, ".6g")


@typechecked
def emit_results(rows: Sequence[ResultsRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in sorted(rows, key=ResultsRow.sort_key):
            writer.writerow(
                [
                    r.method,
                    r.repetition,
                    r.group,
                    r.n_test,
                    _fmt(r.coverage),
                    _fmt(r.mean_length),
                    _fmt(r.infinite_fraction),
                    r.seed,
                ]
            )
    logger.info(f"wrote {len(rows)} result rows to {path}")


@typechecked
def read_results(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"method": str, "group": str})
    if tuple(frame.columns) != RESULTS_HEADER:
        raise ValueError(f"{path} does not have the results header")
    return frame


#
# Experiment configs
#

TOP_LEVEL_KEYS = {
    "METHODS": "methods",
    "ALPHA": "alpha",
    "REPETITIONS": "repetitions",
    "SEED": "seed",
}
SECTIONS: dict[str, tuple[str, type[BaseModel]]] = {
    "GENERATOR": ("generator", GeneratorConfig),
    "DATASET": ("dataset", DatasetConfig),
    "SIZES": ("sizes", SizesConfig),
    "EVAL": ("evaluation", EvalConfig),
    "MODEL": ("model", ModelConfig),
    "IMPUTER": ("imputer", ImputerConfig),
}


def _is_sequence_field(annotation: Any) -> bool:
    if typing.get_origin(annotation) is tuple:
        return True
    return any(_is_sequence_field(a) for a in typing.get_args(annotation) if a is not type(None))


def _sequence_of_str(annotation: Any) -> bool:
    if typing.get_origin(annotation) is tuple:
        return str in typing.get_args(annotation)
    return any(_sequence_of_str(a) for a in typing.get_args(annotation))


def _convert(annotation: Any, value: str) -> Any:
    if not _is_sequence_field(annotation):
        return value
    parts = value.split(",")
    if _sequence_of_str(annotation):
        return parts
    return [p.strip() for p in parts if p.strip()]


@typechecked
def parse_experiment_config(values: Mapping[str, Optional[str]]) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    for key, value in values.items():
        if value is None:
            raise ConfigError(f"config key {key} has no value")
        if key in TOP_LEVEL_KEYS:
            name = TOP_LEVEL_KEYS[key]
            raw[name] = _convert(ExperimentConfig.model_fields[name].annotation, value)
            continue
        prefix, _, field = key.partition("_")
        if prefix not in SECTIONS or not field:
            raise ConfigError(f"unknown config key {key}")
        section, model = SECTIONS[prefix]
        name = field.lower()
        if name not in model.model_fields:
            raise ConfigError(f"unknown config key {key}")
        raw.setdefault(section, {})[name] = _convert(model.model_fields[name].annotation, value)
    return ExperimentConfig.model_validate(raw, strict=False)


@typechecked
def load_experiment_config(path: Path) -> ExperimentConfig:
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_experiment_config(dotenv_values(path, encoding="utf-8"))


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@typechecked
def serialize_experiment_config(cfg: ExperimentConfig) -> str:
    lines = ["# conformal-missing experiment config"]
    for key, name in TOP_LEVEL_KEYS.items():
        lines.append(f"{key}={_format_value(getattr(cfg, name))}")
    for prefix, (section, model) in SECTIONS.items():
        part = getattr(cfg, section)
        if part is None:
            continue
        for name in model.model_fields:
            value = getattr(part, name)
            if value is not None:
                text = _format_value(value)
                lines.append(f"{prefix}_{name.upper()}={_quote(text)}")
    return "\n".join(lines) + "\n"


def _quote(text: str) -> str:
    if not any(c in text for c in " #'\"\\"):
        return text
    escaped = text.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


@typechecked
def save_experiment_config(cfg: ExperimentConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_experiment_config(cfg), encoding="utf-8")
