"""
Split-conformal machinery on top of impute-then-predict.

A *band* maps masked rows to a pair (low, high) of base predictions: two
quantile regressions (QuantileBand), one least-squares mean (MeanBand) or
the Gaussian oracle mean (OracleMeanBand). Mean bands return low == high,
so the CQR score max(low - y, y - high) on them is the absolute residual
and every calibrator below serves both score kinds.

Corrected quantiles use the order statistic k = ceil((1 - alpha)(n + 1)),
and return +inf when k > n.
"""

import logging
import math
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from typeguard import typechecked
from typing_extensions import Self

from .data_model import (
    DimensionMismatchError,
    IntervalBatch,
    MaskedDataset,
    MaskPattern,
    PredictionInterval,
    SplitIndices,
)
from .gaussian_oracle import GlmParams, oracle_mean_batch
from .imputation import Imputer, ImputerHyper, ImputerKind, fit_imputer
from .missingness import pattern_sizes
from .quantile_regression import (
    MeanModel,
    ModelKind,
    QrHyper,
    QuantileModel,
    featurize_batch,
    fit_mean_model,
    fit_quantile_model,
)
from .validation_helpers import (
    ArrayField,
    ExtendedRealModel,
    StrictBaseModel,
    check_alpha,
    freeze_array,
)

logger = logging.getLogger(__name__)

# (1 - alpha)(n + 1) lands a hair above an integer for many exact inputs,
# e.g. 0.7 * 10 = 7.000000000000001.
INDEX_TOL = 1e-10


@typechecked
def corrected_index(n: int, alpha: float) -> int:
    """1-based order-statistic index ceil((1 - alpha)(n + 1)); may exceed n."""
    check_alpha(alpha)
    return max(1, math.ceil((1.0 - alpha) * (n + 1) - INDEX_TOL))


def corrected_upper_quantile(scores: Sequence[float] | NDArray[np.float64], alpha: float) -> float:
    s = np.sort(np.asarray(scores, dtype=np.float64), kind="stable")
    k = corrected_index(int(s.size), alpha)
    if k > s.size:
        return math.inf
    return float(s[k - 1])


def corrected_lower_quantile(scores: Sequence[float] | NDArray[np.float64], alpha: float) -> float:
    return -corrected_upper_quantile(-np.asarray(scores, dtype=np.float64), alpha)


def corrected_upper_quantile_rows(
    scores: NDArray[np.float64], alpha: float
) -> NDArray[np.float64]:
    """corrected_upper_quantile applied to every row of a 2-D array."""
    if scores.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D array, got shape {scores.shape}")
    k = corrected_index(int(scores.shape[1]), alpha)
    if k > scores.shape[1]:
        return np.full(scores.shape[0], math.inf)
    return np.asarray(
        np.partition(scores, k - 1, axis=1)[:, k - 1], dtype=np.float64
    )


def corrected_lower_quantile_rows(
    scores: NDArray[np.float64], alpha: float
) -> NDArray[np.float64]:
    return -corrected_upper_quantile_rows(-scores, alpha)


@typechecked
def cqr_score(q_low: float, q_upp: float, y: float) -> float:
    return max(q_low - y, y - q_upp)


@typechecked
def abs_residual_score(yhat: float, y: float) -> float:
    return abs(y - yhat)


def cqr_scores(
    low: NDArray[np.float64], high: NDArray[np.float64], y: NDArray[np.float64]
) -> NDArray[np.float64]:
    return np.maximum(low - y, y - high)


class ScoreKind(Enum):
    CQR = "cqr"
    ABS_RESIDUAL = "abs_residual"


class QuantileBand(StrictBaseModel):
    """Lower and upper quantile regressions on imputed (and mask-augmented) rows."""

    imputer: Imputer
    low: QuantileModel
    high: QuantileModel
    concat_mask: bool = True

    @model_validator(mode="after")
    def _check_levels(self) -> Self:
        if not self.low.level < self.high.level:
            raise ValueError(
                f"lower level {self.low.level} must be below upper level {self.high.level}"
            )
        return self

    def predict_band(
        self, X: NDArray[np.float64], M: NDArray[np.bool_]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        Z = featurize_batch(self.imputer, X, M, self.concat_mask)
        lo, hi = self.low.predict_batch(Z), self.high.predict_batch(Z)
        # crossing: swap
        return np.minimum(lo, hi), np.maximum(lo, hi)


class MeanBand(StrictBaseModel):
    imputer: Imputer
    model: MeanModel
    concat_mask: bool = True

    def predict_band(
        self, X: NDArray[np.float64], M: NDArray[np.bool_]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        yhat = self.model.predict_batch(featurize_batch(self.imputer, X, M, self.concat_mask))
        return yhat, yhat


class OracleMeanBand(StrictBaseModel):
    """E[Y | X_obs, M] under known Gaussian-linear parameters."""

    params: GlmParams

    def predict_band(
        self, X: NDArray[np.float64], M: NDArray[np.bool_]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        yhat = oracle_mean_batch(self.params, X, M)
        return yhat, yhat


Band = Union[QuantileBand, MeanBand, OracleMeanBand]


class ScoreFunction(StrictBaseModel):
    kind: ScoreKind
    band: Band

    @model_validator(mode="after")
    def _check_kind(self) -> Self:
        quantile = isinstance(self.band, QuantileBand)
        if (self.kind is ScoreKind.CQR) != quantile:
            raise ValueError(
                f"{self.kind.value} score does not fit a {type(self.band).__name__}"
            )
        return self

    def scores(
        self, X: NDArray[np.float64], M: NDArray[np.bool_], y: NDArray[np.float64]
    ) -> NDArray[np.float64]:
        lo, hi = self.band.predict_band(X, M)
        return cqr_scores(lo, hi, y)


def score_kind_of(band: Band) -> ScoreKind:
    return ScoreKind.CQR if isinstance(band, QuantileBand) else ScoreKind.ABS_RESIDUAL


class CalibrationRecord(ExtendedRealModel):
    scores: ArrayField
    alpha: float

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_alpha(self.alpha)
        if self.scores.ndim != 1:
            raise DimensionMismatchError(f"scores must be 1-D, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("calibration scores must be finite")
        object.__setattr__(self, "scores", freeze_array(self.scores))
        return self

    @property
    def size(self) -> int:
        return int(self.scores.shape[0])

    @property
    def correction(self) -> float:
        return corrected_upper_quantile(self.scores, self.alpha)


def widen(
    lo: NDArray[np.float64], hi: NDArray[np.float64], correction: NDArray[np.float64] | float
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    [lo - Q, hi + Q]. An infinite Q gives the whole line; a negative Q that
    would invert the interval collapses it onto its midpoint.
    """
    q = np.broadcast_to(np.asarray(correction, dtype=np.float64), lo.shape)
    lower = np.where(np.isinf(q), -np.inf, lo - q)
    upper = np.where(np.isinf(q), np.inf, hi + q)
    return collapse_inverted(lower, upper)


def collapse_inverted(
    lower: NDArray[np.float64], upper: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    inverted = lower > upper
    if inverted.any():
        mid = 0.5 * (lower + upper)
        lower = np.where(inverted, mid, lower)
        upper = np.where(inverted, mid, upper)
    return lower, upper


@typechecked
def fit_quantile_band(
    train: MaskedDataset,
    imputer_kind: ImputerKind,
    alpha: float,
    model_kind: ModelKind = ModelKind.LINEAR,
    imputer_hyper: Optional[ImputerHyper] = None,
    qr_hyper: Optional[QrHyper] = None,
    concat_mask: bool = True,
) -> QuantileBand:
    """Fit the imputer on `train`, then quantile models at alpha/2 and 1 - alpha/2."""
    check_alpha(alpha)
    imputer = fit_imputer(imputer_kind, train, imputer_hyper)
    Z = featurize_batch(imputer, train.features, train.masks, concat_mask)
    y = np.asarray(train.responses, dtype=np.float64)
    return QuantileBand(
        imputer=imputer,
        low=fit_quantile_model(Z, y, alpha / 2.0, model_kind, qr_hyper),
        high=fit_quantile_model(Z, y, 1.0 - alpha / 2.0, model_kind, qr_hyper),
        concat_mask=concat_mask,
    )


@typechecked
def fit_mean_band(
    train: MaskedDataset,
    imputer_kind: ImputerKind,
    imputer_hyper: Optional[ImputerHyper] = None,
    concat_mask: bool = True,
) -> MeanBand:
    imputer = fit_imputer(imputer_kind, train, imputer_hyper)
    Z = featurize_batch(imputer, train.features, train.masks, concat_mask)
    return MeanBand(
        imputer=imputer,
        model=fit_mean_model(Z, np.asarray(train.responses, dtype=np.float64)),
        concat_mask=concat_mask,
    )


@typechecked
def calibrate_band(band: Band, cal: MaskedDataset, alpha: float) -> CalibrationRecord:
    if cal.size == 0:
        logger.warning("Calibrating on zero rows; every interval will be infinite")
        return CalibrationRecord(scores=np.empty(0), alpha=alpha)
    score = ScoreFunction(kind=score_kind_of(band), band=band)
    return CalibrationRecord(
        scores=score.scores(cal.features, cal.masks, cal.responses), alpha=alpha
    )


def qr_intervals(band: Band, X: NDArray[np.float64], M: NDArray[np.bool_]) -> IntervalBatch:
    """The band itself as intervals, without calibration."""
    lo, hi = band.predict_band(X, M)
    return IntervalBatch.build(lower=lo, upper=hi, masks=M, cal_subset_sizes=0)


class ItpPipeline(StrictBaseModel):
    """Impute-then-predict with one marginal conformal correction."""

    score: ScoreFunction
    record: CalibrationRecord

    @property
    def band(self) -> Band:
        return self.score.band

    @property
    def alpha(self) -> float:
        return self.record.alpha

    def predict_batch(self, X: NDArray[np.float64], M: NDArray[np.bool_]) -> IntervalBatch:
        q = self.record.correction
        if math.isinf(q):
            logger.warning(
                f"Correction is infinite with {self.record.size} calibration scores"
            )
        lo, hi = self.band.predict_band(X, M)
        lower, upper = widen(lo, hi, q)
        return IntervalBatch.build(
            lower=lower, upper=upper, masks=M, cal_subset_sizes=self.record.size
        )

    def predict(self, row: NDArray[np.float64], m: MaskPattern) -> PredictionInterval:
        return self.predict_batch(row[None, :], m.as_array()[None, :])[0]


@typechecked
def pipeline_from_band(band: Band, cal: MaskedDataset, alpha: float) -> ItpPipeline:
    return ItpPipeline(
        score=ScoreFunction(kind=score_kind_of(band), band=band),
        record=calibrate_band(band, cal, alpha),
    )


@typechecked
def itp_conformalize_fit(
    data: MaskedDataset,
    split: SplitIndices,
    imputer_kind: ImputerKind,
    score_kind: ScoreKind,
    alpha: float,
    imputer_hyper: Optional[ImputerHyper] = None,
    qr_hyper: Optional[QrHyper] = None,
    model_kind: ModelKind = ModelKind.LINEAR,
    concat_mask: bool = True,
) -> ItpPipeline:
    data = data.with_split(split)
    train, cal = data.train_part(), data.cal_part()
    band: Band
    if score_kind is ScoreKind.CQR:
        band = fit_quantile_band(
            train, imputer_kind, alpha, model_kind, imputer_hyper, qr_hyper, concat_mask
        )
    else:
        band = fit_mean_band(train, imputer_kind, imputer_hyper, concat_mask)
    pipeline = pipeline_from_band(band, cal, alpha)
    logger.info(
        f"calibrated {score_kind.value} on {cal.size} rows, correction {pipeline.record.correction:.4g}"
    )
    return pipeline


@typechecked
def itp_conformalize_predict(
    pipeline: ItpPipeline, row: NDArray[np.float64], m: MaskPattern
) -> PredictionInterval:
    return pipeline.predict(row, m)


def itp_conformalize_predict_batch(
    pipeline: ItpPipeline, X: NDArray[np.float64], M: NDArray[np.bool_]
) -> IntervalBatch:
    return pipeline.predict_batch(X, M)


class PatternSizeCalibration(StrictBaseModel):
    """One correction per pattern size; sizes unseen at calibration use the marginal one."""

    band: Band
    marginal: CalibrationRecord
    by_size: dict[int, CalibrationRecord]

    def record_for(self, size: int) -> CalibrationRecord:
        return self.by_size.get(size, self.marginal)

    def predict_batch(self, X: NDArray[np.float64], M: NDArray[np.bool_]) -> IntervalBatch:
        sizes = pattern_sizes(M)
        q = np.empty(X.shape[0])
        n_used = np.empty(X.shape[0], dtype=np.int64)
        for s in np.unique(sizes):
            record = self.record_for(int(s))
            q[sizes == s] = record.correction
            n_used[sizes == s] = record.size
        lo, hi = self.band.predict_band(X, M)
        lower, upper = widen(lo, hi, q)
        return IntervalBatch.build(lower=lower, upper=upper, masks=M, cal_subset_sizes=n_used)

    def predict(self, row: NDArray[np.float64], m: MaskPattern) -> PredictionInterval:
        return self.predict_batch(row[None, :], m.as_array()[None, :])[0]


@typechecked
def groupwise_calibrate_by_pattern_size(
    pipeline: ItpPipeline, cal: MaskedDataset, alpha: float
) -> PatternSizeCalibration:
    band = pipeline.band
    marginal = calibrate_band(band, cal, alpha)
    by_size: dict[int, CalibrationRecord] = {}
    if cal.size:
        sizes = pattern_sizes(cal.masks)
        for s in np.unique(sizes):
            by_size[int(s)] = CalibrationRecord(
                scores=marginal.scores[sizes == s], alpha=alpha
            )
            logger.debug(
                f"size {int(s)}: {by_size[int(s)].size} scores, correction {by_size[int(s)].correction:.4g}"
            )
    return PatternSizeCalibration(band=band, marginal=marginal, by_size=by_size)


@typechecked
def exact_coverage_by_rank(n: int, alpha: float) -> Fraction:
    """
    Exact coverage of split conformal with n calibration scores, found by
    enumerating the n + 1 equally likely ranks of the test score among
    distinct exchangeable scores.
    """
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    covered = 0
    for rank in range(1, n + 2):
        others = [float(v) for v in range(1, n + 2) if v != rank]
        if rank <= corrected_upper_quantile(others, alpha):
            covered += 1
    return Fraction(covered, n + 1)
