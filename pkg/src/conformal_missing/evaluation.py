"""
Coverage and length estimators, plus the repeated-experiment runner.

Each repetition r uses seed_r = base seed + r, split into independent
streams (data, split, marginal test, pattern test, methods) with
numpy's SeedSequence. Every method is evaluated on a marginal test set and
on a conditional test set holding a fixed number of rows per evaluation
pattern (per mask, or per pattern size).
"""

import logging
import math
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from numpy.typing import NDArray
from pydantic import ConfigDict, model_validator
from tqdm import tqdm
from typeguard import typechecked
from typing_extensions import ClassVar, Self

from .conformal_core import (
    Band,
    OracleMeanBand,
    fit_mean_band,
    fit_quantile_band,
    groupwise_calibrate_by_pattern_size,
    pipeline_from_band,
    qr_intervals,
)
from .cp_mda import (
    MdaPipeline,
    PatternChoice,
    PatternChoiceMode,
    mda_exact_interval_batch,
    mda_nested_interval_batch,
    mda_nested_partitioned_interval_batch,
)
from .data_model import (
    IntervalBatch,
    MaskedDataset,
    MaskPattern,
    SplitIndices,
    split_train_cal,
)
from .gaussian_oracle import (
    GlmParams,
    generate_glm_dataset,
    generate_glm_dataset_with_masks,
    oracle_interval_batch,
)
from .imputation import ImputerHyper, ImputerKind
from .missingness import (
    McarSpec,
    apply_masks,
    enumerate_masks,
    inject_mcar,
    masks_included_in,
    pattern_sizes,
    sample_eval_patterns,
)
from .quantile_regression import ModelKind, QrHyper
from .validation_helpers import (
    STRICT_MODEL_CONFIG,
    ExtendedRealModel,
    StrictBaseModel,
    check_alpha,
    check_rate,
)

logger = logging.getLogger(__name__)

MARGINAL_GROUP = "marginal"
AUTO_MASK_MODE_MAX_D = 4
AUTO_PER_MASK = 500
AUTO_PER_SIZE = 100
STREAMS = ("data", "split", "test", "pattern", "methods")


class Method(Enum):
    QR = "qr"
    CQR = "cqr"
    CQR_MDA_EXACT = "cqr_mda_exact"
    CQR_MDA_NESTED = "cqr_mda_nested"
    CQR_MDA_NESTED_PARTITIONED = "cqr_mda_nested_partitioned"
    MEAN_SCP = "mean_scp"
    SCP_BY_PATTERN_SIZE = "scp_by_pattern_size"
    ORACLE = "oracle"


class ExperimentError(RuntimeError):
    def __init__(self, repetition: int, method: str, detail: str):
        super().__init__(repetition, method, detail)
        self.repetition = repetition
        self.method = method
        self.detail = detail

    def __str__(self) -> str:
        return f"repetition {self.repetition}, method {self.method}: {self.detail}"


class CoverageRecord(ExtendedRealModel):
    group: str
    n_test: int
    coverage: float
    mean_length: float
    infinite_fraction: float
    clamped_mean_length: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.n_test < 1:
            raise ValueError(f"group {self.group} has no test rows")
        if not 0.0 <= self.coverage <= 1.0 or not 0.0 <= self.infinite_fraction <= 1.0:
            raise ValueError(f"group {self.group}: fractions must lie in [0, 1]")
        if math.isnan(self.mean_length):
            raise ValueError(f"group {self.group}: mean length is NaN")
        return self


class CoverageReport(StrictBaseModel):
    records: tuple[CoverageRecord, ...]

    def record(self, group: str) -> CoverageRecord:
        for r in self.records:
            if r.group == group:
                return r
        raise KeyError(group)

    @property
    def marginal(self) -> CoverageRecord:
        return self.record(MARGINAL_GROUP)

    @property
    def mask_records(self) -> list[CoverageRecord]:
        return [r for r in self.records if r.group.startswith("mask:")]

    @property
    def size_records(self) -> list[CoverageRecord]:
        return [r for r in self.records if r.group.startswith("size:")]

    @property
    def lowest_mask_coverage(self) -> float:
        return min(r.coverage for r in self.mask_records)

    @property
    def highest_mask_coverage(self) -> float:
        return max(r.coverage for r in self.mask_records)


def mask_group(m: MaskPattern) -> str:
    return f"mask:{m.key}"


def size_group(size: int) -> str:
    return f"size:{size}"


def _record(
    group: str,
    covered: NDArray[np.bool_],
    lengths: NDArray[np.float64],
    clamp_range: Optional[float],
) -> CoverageRecord:
    infinite = np.isinf(lengths)
    finite = lengths[~infinite]
    clamped = None
    if clamp_range is not None:
        clamped = float(np.where(infinite, clamp_range, lengths).mean())
    return CoverageRecord(
        group=group,
        n_test=int(covered.size),
        coverage=float(covered.mean()),
        mean_length=float(finite.mean()) if finite.size else math.inf,
        infinite_fraction=float(infinite.mean()),
        clamped_mean_length=clamped,
    )


@typechecked
def coverage_report(
    intervals: IntervalBatch,
    y: NDArray[np.float64],
    masks: NDArray[np.bool_],
    clamp_range: Optional[float] = None,
) -> CoverageReport:
    """
    Coverage (closed intervals; infinite bounds cover), mean finite length
    and infinite fraction for the whole set, each distinct mask and each
    pattern size. `clamp_range` replaces infinite lengths in the clamped mean.
    """
    n = len(intervals)
    if y.shape != (n,) or masks.shape[0] != n:
        raise ValueError(f"{n} intervals, {y.shape[0]} responses, {masks.shape[0]} masks")
    if n == 0:
        raise ValueError("cannot report coverage on zero test rows")
    covered = (intervals.lower <= y) & (y <= intervals.upper)
    lengths = intervals.lengths

    records = [_record(MARGINAL_GROUP, covered, lengths, clamp_range)]
    uniq, inverse = np.unique(masks, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for u, bits in enumerate(uniq):
        rows = inverse == u
        records.append(
            _record(mask_group(MaskPattern.from_array(bits)), covered[rows], lengths[rows], clamp_range)
        )
    sizes = pattern_sizes(masks)
    for s in np.unique(sizes):
        rows = sizes == s
        records.append(_record(size_group(int(s)), covered[rows], lengths[rows], clamp_range))
    return CoverageReport(records=tuple(records))


class GeneratorConfig(StrictBaseModel):
    """Equicorrelated Gaussian-linear generator with homogeneous MCAR masks."""

    dimension: int = 3
    phi: float = 0.8
    noise_std: float = 1.0
    mean: float = 1.0
    missing_rate: float = 0.2

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_rate(self.missing_rate)
        self.params()
        return self

    def params(self) -> GlmParams:
        return GlmParams.equicorrelated(
            self.dimension, phi=self.phi, noise_std=self.noise_std, mean_value=self.mean
        )

    def mcar(self) -> McarSpec:
        return McarSpec(rate=self.missing_rate)


class DatasetConfig(StrictBaseModel):
    # the empty string is a legitimate NA token
    model_config: ClassVar[ConfigDict] = ConfigDict(**{**STRICT_MODEL_CONFIG, "str_min_length": 0})

    path: Path
    target: str
    na_tokens: tuple[str, ...] = ("", "NA", "NaN")
    inject_columns: Optional[tuple[int, ...]] = None
    missing_rate: float = 0.2

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_rate(self.missing_rate)
        if not self.target:
            raise ValueError("target column name must not be empty")
        if not self.na_tokens:
            raise ValueError("at least one NA token is needed")
        return self


class SizesConfig(StrictBaseModel):
    train: int = 500
    cal: int = 250
    test: int = 2000

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.train < 2 or self.cal < 1 or self.test < 1:
            raise ValueError(
                f"need train >= 2, cal >= 1 and test >= 1, got {self.train}/{self.cal}/{self.test}"
            )
        return self


class EvalMode(Enum):
    AUTO = "auto"
    MASK = "mask"
    SIZE = "size"


class EvalConfig(StrictBaseModel):
    mode: EvalMode = EvalMode.AUTO
    # None picks 500 per mask or 100 per size
    per_pattern: Optional[int] = None
    include_all_missing: bool = False
    partition_mode: PatternChoiceMode = PatternChoiceMode.DEFAULT
    partition_mask: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.per_pattern is not None and self.per_pattern < 1:
            raise ValueError(f"per_pattern must be positive, got {self.per_pattern}")
        if (self.partition_mode is PatternChoiceMode.FIXED) != (self.partition_mask is not None):
            raise ValueError("partition_mask is given exactly when partition_mode is fixed")
        if self.partition_mask is not None:
            MaskPattern.from_key(self.partition_mask)
        return self

    def resolve(self, d: int) -> tuple[EvalMode, int]:
        mode = self.mode
        if mode is EvalMode.AUTO:
            mode = EvalMode.MASK if d <= AUTO_MASK_MODE_MAX_D else EvalMode.SIZE
        per = self.per_pattern
        if per is None:
            per = AUTO_PER_MASK if mode is EvalMode.MASK else AUTO_PER_SIZE
        return mode, per

    def pattern_choice(self, seed: int) -> PatternChoice:
        if self.partition_mode is PatternChoiceMode.FIXED:
            assert self.partition_mask is not None
            return PatternChoice(
                mode=self.partition_mode, mask=MaskPattern.from_key(self.partition_mask)
            )
        if self.partition_mode is PatternChoiceMode.RANDOM:
            return PatternChoice(mode=self.partition_mode, seed=seed)
        return PatternChoice()


class ModelConfig(StrictBaseModel):
    kind: ModelKind = ModelKind.LINEAR
    concat_mask: bool = True
    hidden_dim: int = 64
    dropout: float = 0.1
    learning_rate: float = 5e-4
    max_epochs: int = 2000
    batch_size: int = 64
    patience: int = 200

    def qr_hyper(self, seed: int) -> QrHyper:
        return QrHyper(
            hidden_dim=self.hidden_dim,
            dropout=self.dropout,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            patience=self.patience,
            seed=seed,
        )


class ImputerConfig(StrictBaseModel):
    kind: ImputerKind = ImputerKind.ITERATIVE_RIDGE
    ridge_penalty: Optional[float] = None
    max_sweeps: int = 10
    tol: float = 1e-6
    fill_value: float = 0.0

    def hyper(self) -> ImputerHyper:
        return ImputerHyper(
            ridge_penalty=self.ridge_penalty,
            max_sweeps=self.max_sweeps,
            tol=self.tol,
            fill_value=self.fill_value,
        )


class ExperimentConfig(StrictBaseModel):
    generator: Optional[GeneratorConfig] = None
    dataset: Optional[DatasetConfig] = None
    methods: tuple[Method, ...] = (
        Method.QR,
        Method.CQR,
        Method.CQR_MDA_EXACT,
        Method.CQR_MDA_NESTED,
    )
    alpha: float = 0.1
    sizes: SizesConfig = SizesConfig()
    evaluation: EvalConfig = EvalConfig()
    model: ModelConfig = ModelConfig()
    imputer: ImputerConfig = ImputerConfig()
    repetitions: int = 1
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_alpha(self.alpha)
        if (self.generator is None) == (self.dataset is None):
            raise ValueError("exactly one of a generator and a dataset must be configured")
        if not self.methods:
            raise ValueError("at least one method is needed")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("a method is listed twice")
        if self.dataset is not None and Method.ORACLE in self.methods:
            raise ValueError("the oracle method needs the synthetic generator")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be at least 1, got {self.repetitions}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        return self


class RepetitionData(StrictBaseModel):
    """Everything one repetition evaluates on; `pool` carries the train/cal split."""

    repetition: int
    seed: int
    pool: MaskedDataset
    marginal_test: MaskedDataset
    conditional_test: MaskedDataset

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.pool.split is None:
            raise ValueError("the pool must carry a train/cal split")
        return self


class RepetitionReport(StrictBaseModel):
    method: Method
    repetition: int
    seed: int
    marginal: CoverageReport
    conditional: CoverageReport

    def emitted_records(self) -> list[CoverageRecord]:
        """The marginal group of the marginal set, then mask and size groups of the conditional set."""
        return [self.marginal.marginal] + [
            r for r in self.conditional.records if r.group != MARGINAL_GROUP
        ]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def _method_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def eval_masks(
    cfg: ExperimentConfig,
    d: int,
    mechanism_masks: Optional[NDArray[np.bool_]],
    rng: np.random.Generator,
) -> NDArray[np.bool_]:
    mode, per = cfg.evaluation.resolve(d)
    if mode is EvalMode.MASK:
        patterns = enumerate_masks(d, cfg.evaluation.include_all_missing)
        return np.repeat(np.array([p.bits for p in patterns], dtype=bool), per, axis=0)
    return sample_eval_patterns(
        d, per, mechanism_masks, rng, cfg.evaluation.include_all_missing
    )


@typechecked
def draw_synthetic_repetition(cfg: ExperimentConfig, repetition: int) -> RepetitionData:
    gen = cfg.generator
    if gen is None:
        raise ValueError("no generator configured")
    seed = cfg.seed + repetition
    streams = _streams(seed)
    params, mcar = gen.params(), gen.mcar()

    n_pool = cfg.sizes.train + cfg.sizes.cal
    pool = generate_glm_dataset(params, n_pool, mcar, streams["data"])
    split = split_train_cal(n_pool, cfg.sizes.cal / n_pool, streams["split"])
    marginal = generate_glm_dataset(params, cfg.sizes.test, mcar, streams["test"])
    mask_rng, data_rng = streams["pattern"].spawn(2)
    masks = eval_masks(cfg, params.dimension, pool.masks, mask_rng)
    conditional = generate_glm_dataset_with_masks(params, masks, data_rng)
    return RepetitionData(
        repetition=repetition,
        seed=seed,
        pool=pool.with_split(split),
        marginal_test=marginal,
        conditional_test=conditional,
    )


@typechecked
def draw_real_repetition(
    cfg: ExperimentConfig, dataset: MaskedDataset, repetition: int
) -> RepetitionData:
    """
    Inject MCAR cells, shuffle rows into train/cal/test, and build the
    conditional set by masking test rows with evaluation masks. A row serves
    a mask only if its originally missing cells are all covered by that mask.
    """
    if cfg.dataset is None:
        raise ValueError("no dataset configured")
    seed = cfg.seed + repetition
    streams = _streams(seed)
    n, d = dataset.size, dataset.dimension
    injected = inject_mcar(
        dataset, cfg.dataset.inject_columns, cfg.dataset.missing_rate, streams["data"]
    )

    n_fit = cfg.sizes.train + cfg.sizes.cal
    if n_fit >= n:
        raise ValueError(f"dataset has {n} rows, not enough for {n_fit} train+cal rows")
    n_test = min(cfg.sizes.test, n - n_fit)
    if n_test < cfg.sizes.test:
        logger.warning(f"only {n_test} rows left for testing (asked for {cfg.sizes.test})")
    perm = streams["split"].permutation(n)
    split = SplitIndices(
        train=tuple(range(cfg.sizes.train)), cal=tuple(range(cfg.sizes.train, n_fit))
    )
    pool = injected.subset(perm[:n_fit]).with_split(split)
    test_idx = perm[n_fit : n_fit + n_test]
    marginal = injected.subset(test_idx)

    original = dataset.masks[test_idx]
    complete = marginal.complete_features()
    mask_rng, pick_rng = streams["pattern"].spawn(2)
    wanted = eval_masks(cfg, d, pool.masks, mask_rng)
    rows: list[int] = []
    kept: list[NDArray[np.bool_]] = []
    for bits in wanted:
        eligible = np.flatnonzero(masks_included_in(original, MaskPattern.from_array(bits)))
        if eligible.size == 0:
            continue
        rows.append(int(eligible[pick_rng.integers(0, eligible.size)]))
        kept.append(bits)
    if not rows:
        raise ValueError("no test row can carry any evaluation mask")
    if len(rows) < wanted.shape[0]:
        logger.warning(
            f"{wanted.shape[0] - len(rows)} evaluation masks had no eligible test row and were skipped"
        )
    idx = np.asarray(rows, dtype=np.intp)
    M = np.asarray(kept, dtype=bool)
    conditional = MaskedDataset.build(
        apply_masks(complete[idx], M),
        M,
        marginal.responses[idx],
        hidden_features=complete[idx],
        feature_names=dataset.feature_names,
    )
    return RepetitionData(
        repetition=repetition,
        seed=seed,
        pool=pool,
        marginal_test=marginal,
        conditional_test=conditional,
    )


def _interval_makers(
    cfg: ExperimentConfig,
    data: RepetitionData,
    params: Optional[GlmParams],
    method_seed: int,
) -> dict[Method, Callable[[MaskedDataset], IntervalBatch]]:
    """One closure per method; shared fits are computed on first use."""
    train, cal = data.pool.train_part(), data.pool.cal_part()
    cache: dict[str, Any] = {}
    qr_hyper = cfg.model.qr_hyper(method_seed)
    imputer_hyper = cfg.imputer.hyper()

    def quantile_band() -> Band:
        if "band" not in cache:
            cache["band"] = fit_quantile_band(
                train,
                cfg.imputer.kind,
                cfg.alpha,
                cfg.model.kind,
                imputer_hyper,
                qr_hyper,
                cfg.model.concat_mask,
            )
        return cache["band"]  # type: ignore[no-any-return]

    def mean_band() -> Band:
        if "mean" not in cache:
            if params is not None:
                cache["mean"] = OracleMeanBand(params=params)
            else:
                cache["mean"] = fit_mean_band(
                    train, cfg.imputer.kind, imputer_hyper, cfg.model.concat_mask
                )
        return cache["mean"]  # type: ignore[no-any-return]

    def mda() -> MdaPipeline:
        if "mda" not in cache:
            cache["mda"] = MdaPipeline(band=quantile_band(), cal=cal, alpha=cfg.alpha)
        return cache["mda"]  # type: ignore[no-any-return]

    def qr(t: MaskedDataset) -> IntervalBatch:
        if "qr" not in cache:
            both = data.pool.subset(np.arange(data.pool.size))
            cache["qr"] = fit_quantile_band(
                both,
                cfg.imputer.kind,
                cfg.alpha,
                cfg.model.kind,
                imputer_hyper,
                qr_hyper,
                cfg.model.concat_mask,
            )
        return qr_intervals(cache["qr"], t.features, t.masks)

    def oracle(t: MaskedDataset) -> IntervalBatch:
        if params is None:
            raise ValueError("the oracle method needs the synthetic generator")
        return oracle_interval_batch(params, t.features, t.masks, cfg.alpha)

    choice = cfg.evaluation.pattern_choice(method_seed)
    return {
        Method.QR: qr,
        Method.CQR: lambda t: pipeline_from_band(quantile_band(), cal, cfg.alpha).predict_batch(
            t.features, t.masks
        ),
        Method.CQR_MDA_EXACT: lambda t: mda_exact_interval_batch(mda(), t.features, t.masks),
        Method.CQR_MDA_NESTED: lambda t: mda_nested_interval_batch(mda(), t.features, t.masks),
        Method.CQR_MDA_NESTED_PARTITIONED: lambda t: mda_nested_partitioned_interval_batch(
            mda(), t.features, t.masks, choice
        ),
        Method.MEAN_SCP: lambda t: pipeline_from_band(mean_band(), cal, cfg.alpha).predict_batch(
            t.features, t.masks
        ),
        Method.SCP_BY_PATTERN_SIZE: lambda t: groupwise_calibrate_by_pattern_size(
            pipeline_from_band(mean_band(), cal, cfg.alpha), cal, cfg.alpha
        ).predict_batch(t.features, t.masks),
        Method.ORACLE: oracle,
    }


@typechecked
def run_repetition(
    cfg: ExperimentConfig, data: RepetitionData, params: Optional[GlmParams] = None
) -> list[RepetitionReport]:
    method_seed = _method_seed(_streams(data.seed)["methods"])
    makers = _interval_makers(cfg, data, params, method_seed)
    y_fit = data.pool.responses
    clamp = float(y_fit.max() - y_fit.min())

    reports = []
    for method in cfg.methods:
        try:
            reports.append(
                RepetitionReport(
                    method=method,
                    repetition=data.repetition,
                    seed=data.seed,
                    marginal=_evaluate(makers[method], data.marginal_test, clamp),
                    conditional=_evaluate(makers[method], data.conditional_test, clamp),
                )
            )
        except Exception as exc:
            raise ExperimentError(data.repetition, method.value, f"{type(exc).__name__}: {exc}") from exc
        logger.debug(
            f"repetition {data.repetition} {method.value}: marginal coverage {reports[-1].marginal.marginal.coverage:.3f}"
        )
    return reports


def _evaluate(
    make: Callable[[MaskedDataset], IntervalBatch], test: MaskedDataset, clamp: float
) -> CoverageReport:
    return coverage_report(make(test), test.responses, test.masks, clamp)


def _run_one(
    cfg: ExperimentConfig,
    repetition: int,
    data: Optional[RepetitionData],
    dataset: Optional[MaskedDataset],
) -> list[RepetitionReport]:
    if data is None:
        if dataset is not None:
            data = draw_real_repetition(cfg, dataset, repetition)
        else:
            data = draw_synthetic_repetition(cfg, repetition)
    params = cfg.generator.params() if cfg.generator is not None else None
    return run_repetition(cfg, data, params)


@typechecked
def run_experiment(
    cfg: ExperimentConfig,
    repetitions: Optional[Sequence[RepetitionData]] = None,
    dataset: Optional[MaskedDataset] = None,
    n_jobs: int = 1,
    progress: bool = False,
) -> list[RepetitionReport]:
    """
    Run every configured repetition and return one report per method per
    repetition, ordered by (repetition, method).

    Repetitions come from `repetitions` when given (pre-generated data),
    else from `dataset` for real-data configs, else from the generator.
    """
    if cfg.dataset is not None and dataset is None and repetitions is None:
        raise ValueError("a dataset config needs the loaded dataset")
    if repetitions is not None and len(repetitions) != cfg.repetitions:
        raise ValueError(
            f"config asks for {cfg.repetitions} repetitions, {len(repetitions)} were supplied"
        )
    logger.info(
        f"running {cfg.repetitions} repetitions of {', '.join(m.value for m in cfg.methods)}"
    )
    jobs = (
        delayed(_run_one)(
            cfg, r, None if repetitions is None else repetitions[r], dataset
        )
        for r in tqdm(range(cfg.repetitions), disable=not progress, file=sys.stderr)
    )
    results = Parallel(n_jobs=n_jobs)(jobs)
    reports = [rep for batch in results for rep in batch]
    order = {m: i for i, m in enumerate(Method)}
    return sorted(reports, key=lambda r: (r.repetition, order[r.method]))


def reports_frame(reports: Sequence[RepetitionReport]) -> pd.DataFrame:
    """One row per (method, repetition, group), including the clamped mean length."""
    rows = [
        {
            "method": rep.method.value,
            "repetition": rep.repetition,
            "group": rec.group,
            "n_test": rec.n_test,
            "coverage": rec.coverage,
            "mean_length": rec.mean_length,
            "infinite_fraction": rec.infinite_fraction,
            "seed": rep.seed,
            "clamped_mean_length": rec.clamped_mean_length,
        }
        for rep in reports
        for rec in rep.emitted_records()
    ]
    return pd.DataFrame(
        rows,
        columns=[
            "method",
            "repetition",
            "group",
            "n_test",
            "coverage",
            "mean_length",
            "infinite_fraction",
            "seed",
            "clamped_mean_length",
        ],
    )


def aggregate_results(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Per (method, group): repetitions, mean coverage, its Monte Carlo
    standard error std(ddof=1)/sqrt(R), and mean lengths and infinite
    fraction. The clamped length is averaged when the column is present.
    """
    grouped = frame.groupby(["method", "group"], sort=True)
    out = grouped.agg(
        repetitions=("coverage", "size"),
        n_test=("n_test", "mean"),
        coverage=("coverage", "mean"),
        coverage_std=("coverage", "std"),
        mean_length=("mean_length", "mean"),
        infinite_fraction=("infinite_fraction", "mean"),
    )
    out["mcse"] = out["coverage_std"] / np.sqrt(out["repetitions"])
    out = out.drop(columns="coverage_std")
    if "clamped_mean_length" in frame.columns and frame["clamped_mean_length"].notna().any():
        out["clamped_mean_length"] = grouped["clamped_mean_length"].mean()
    return out.reset_index()
