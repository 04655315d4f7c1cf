"""
Conformal prediction with missing-data augmentation (CP-MDA).

Exact keeps the calibration rows whose mask is included in the test mask,
masks them further until their mask equals the test mask, and calibrates
on them alone. Nested keeps every calibration row, masks it with the union
of its own and the test mask, and builds two bags of shifted test
predictions whose corrected quantiles give the interval. The partitioned
Nested variant restricts both bags to rows sharing one augmented mask.

Any band works; CQR is the usual choice. With a mean band the same code
gives the absolute-residual versions.
"""

import logging
import math
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from typeguard import typechecked
from typing_extensions import Self

from .conformal_core import (
    Band,
    QuantileBand,
    ScoreFunction,
    collapse_inverted,
    corrected_index,
    corrected_lower_quantile_rows,
    corrected_upper_quantile,
    corrected_upper_quantile_rows,
    fit_quantile_band,
    score_kind_of,
    widen,
)
from .data_model import (
    DimensionMismatchError,
    IntervalBatch,
    MaskedDataset,
    MaskPattern,
    PredictionInterval,
    SeedLike,
    SplitIndices,
    as_generator,
)
from .imputation import ImputerHyper, ImputerKind
from .missingness import apply_masks, mask_included, masks_included_in
from .quantile_regression import ModelKind, QrHyper
from .validation_helpers import (
    ArrayField,
    ExtendedRealModel,
    StrictBaseModel,
    check_alpha,
    freeze_array,
)

logger = logging.getLogger(__name__)

# Test rows are scored against the whole calibration set in blocks of this many.
NESTED_BLOCK_ROWS = 512


class MdaPipeline(StrictBaseModel):
    band: Band
    cal: MaskedDataset
    alpha: float

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_alpha(self.alpha)
        if isinstance(self.band, QuantileBand):
            if not math.isclose(self.band.low.level, self.alpha / 2.0) or not math.isclose(
                self.band.low.level + self.band.high.level, 1.0
            ):
                raise ValueError(
                    f"quantile levels ({self.band.low.level}, {self.band.high.level}) do not match alpha={self.alpha}"
                )
        return self

    @property
    def dimension(self) -> int:
        return self.cal.dimension

    @property
    def score(self) -> ScoreFunction:
        return ScoreFunction(kind=score_kind_of(self.band), band=self.band)

    def cal_scores_under(self, masks: NDArray[np.bool_]) -> NDArray[np.float64]:
        """Scores of every calibration row after masking it with `masks` (row-aligned)."""
        X = apply_masks(self.cal.features, masks)
        return self.score.scores(X, masks, self.cal.responses)


@typechecked
def fit_mda_pipeline(
    data: MaskedDataset,
    split: SplitIndices,
    imputer_kind: ImputerKind,
    alpha: float,
    model_kind: ModelKind = ModelKind.LINEAR,
    imputer_hyper: Optional[ImputerHyper] = None,
    qr_hyper: Optional[QrHyper] = None,
) -> MdaPipeline:
    """Fit on the training rows only; calibration rows are kept raw."""
    data = data.with_split(split)
    band = fit_quantile_band(
        data.train_part(), imputer_kind, alpha, model_kind, imputer_hyper, qr_hyper
    )
    return MdaPipeline(band=band, cal=data.cal_part(), alpha=alpha)


def _check_test(p: MdaPipeline, X: NDArray[np.float64], M: NDArray[np.bool_]) -> None:
    if X.ndim != 2 or X.shape != M.shape or X.shape[1] != p.dimension:
        raise DimensionMismatchError(
            f"test features {X.shape} and masks {M.shape} for d={p.dimension}"
        )


def _groups(M: NDArray[np.bool_]) -> list[tuple[MaskPattern, NDArray[np.intp]]]:
    if M.shape[0] == 0:
        return []
    uniq, inverse = np.unique(M, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    return [
        (MaskPattern.from_array(bits), np.flatnonzero(inverse == u))
        for u, bits in enumerate(uniq)
    ]


def mda_exact_interval_batch(
    p: MdaPipeline, X: NDArray[np.float64], M: NDArray[np.bool_]
) -> IntervalBatch:
    """mda_exact_interval for every row; the correction is computed once per distinct test mask."""
    _check_test(p, X, M)
    lower = np.empty(X.shape[0])
    upper = np.empty(X.shape[0])
    sizes = np.zeros(X.shape[0], dtype=np.int64)
    for m, rows in _groups(M):
        selected = masks_included_in(p.cal.masks, m)
        n_sel = int(selected.sum())
        augmented = np.broadcast_to(m.as_array(), (n_sel, m.dimension)).copy()
        assert not np.any(p.cal.masks[selected] & ~augmented)
        if n_sel:
            X_cal = apply_masks(p.cal.features[selected], augmented)
            scores = p.score.scores(X_cal, augmented, p.cal.responses[selected])
            q = corrected_upper_quantile(scores, p.alpha)
        else:
            q = math.inf
        if math.isinf(q):
            logger.warning(
                f"Exact: {n_sel} calibration rows for mask {m.key}; interval is infinite"
            )
        logger.debug(f"Exact: mask {m.key}, {n_sel} calibration rows, correction {q:.4g}")
        lo, hi = p.band.predict_band(X[rows], M[rows])
        lower[rows], upper[rows] = widen(lo, hi, q)
        sizes[rows] = n_sel
    return IntervalBatch.build(lower=lower, upper=upper, masks=M, cal_subset_sizes=sizes)


@typechecked
def mda_exact_interval(
    p: MdaPipeline, row: NDArray[np.float64], m: MaskPattern
) -> PredictionInterval:
    return mda_exact_interval_batch(p, row[None, :], m.as_array()[None, :])[0]


class NestedBags(ExtendedRealModel):
    """The two bags of one Nested prediction, aligned with the calibration rows."""

    test_mask: MaskPattern
    lower: ArrayField
    upper: ArrayField
    augmented_masks: ArrayField

    @model_validator(mode="after")
    def _check(self) -> Self:
        n = self.lower.shape[0]
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise DimensionMismatchError("both bags must be 1-D of equal size")
        if self.augmented_masks.shape != (n, self.test_mask.dimension):
            raise DimensionMismatchError(
                f"augmented masks shape {self.augmented_masks.shape} for {n} bag elements"
            )
        if np.any(self.test_mask.as_array()[None, :] & ~self.augmented_masks):
            raise ValueError("an augmented mask does not include the test mask")
        for name in ("lower", "upper", "augmented_masks"):
            object.__setattr__(self, name, freeze_array(getattr(self, name)))
        return self

    @property
    def size(self) -> int:
        return int(self.lower.shape[0])

    def interval(self, alpha: float) -> tuple[float, float]:
        lo = corrected_lower_quantile_rows(self.lower[None, :], alpha)
        hi = corrected_upper_quantile_rows(self.upper[None, :], alpha)
        lo, hi = collapse_inverted(lo, hi)
        return float(lo[0]), float(hi[0])


def _augmented_masks(p: MdaPipeline, m: MaskPattern) -> NDArray[np.bool_]:
    return p.cal.masks | m.as_array()[None, :]


def _test_band_under(
    p: MdaPipeline,
    X: NDArray[np.float64],
    uniq: NDArray[np.bool_],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Band of every test row under every mask in `uniq`; shape (rows, len(uniq))."""
    lo = np.empty((X.shape[0], uniq.shape[0]))
    hi = np.empty((X.shape[0], uniq.shape[0]))
    for u, bits in enumerate(uniq):
        masks = np.broadcast_to(bits, X.shape).copy()
        lo[:, u], hi[:, u] = p.band.predict_band(apply_masks(X, masks), masks)
    return lo, hi


def _nested_parts(
    p: MdaPipeline, X: NDArray[np.float64], m: MaskPattern
) -> tuple[NDArray[np.bool_], NDArray[np.float64], NDArray[np.intp], NDArray[np.float64], NDArray[np.float64]]:
    aug = _augmented_masks(p, m)
    scores = p.cal_scores_under(aug)
    uniq, inverse = np.unique(aug, axis=0, return_inverse=True)
    lo, hi = _test_band_under(p, X, uniq)
    return aug, scores, inverse.reshape(-1), lo, hi


@typechecked
def nested_bags(p: MdaPipeline, row: NDArray[np.float64], m: MaskPattern) -> NestedBags:
    _check_test(p, row[None, :], m.as_array()[None, :])
    if p.cal.size == 0:
        return NestedBags(
            test_mask=m,
            lower=np.empty(0),
            upper=np.empty(0),
            augmented_masks=np.empty((0, m.dimension), dtype=bool),
        )
    aug, scores, inverse, lo, hi = _nested_parts(p, row[None, :], m)
    return NestedBags(
        test_mask=m,
        lower=lo[0, inverse] - scores,
        upper=hi[0, inverse] + scores,
        augmented_masks=aug,
    )


def mda_nested_interval_batch(
    p: MdaPipeline, X: NDArray[np.float64], M: NDArray[np.bool_]
) -> IntervalBatch:
    """
    mda_nested_interval for every row. Calibration scores are computed once
    per distinct test mask and test predictions once per distinct augmented
    mask.
    """
    _check_test(p, X, M)
    n_cal = p.cal.size
    lower = np.full(X.shape[0], -math.inf)
    upper = np.full(X.shape[0], math.inf)
    if corrected_index(n_cal, p.alpha) > n_cal:
        logger.warning(f"Nested: {n_cal} calibration rows are too few; intervals are infinite")
        return IntervalBatch.build(lower=lower, upper=upper, masks=M, cal_subset_sizes=n_cal)

    for m, rows in _groups(M):
        aug = _augmented_masks(p, m)
        scores = p.cal_scores_under(aug)
        uniq, inverse = np.unique(aug, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        logger.debug(f"Nested: mask {m.key}, {uniq.shape[0]} distinct augmented masks")
        for start in range(0, rows.size, NESTED_BLOCK_ROWS):
            block = rows[start : start + NESTED_BLOCK_ROWS]
            lo, hi = _test_band_under(p, X[block], uniq)
            z_low = lo[:, inverse] - scores[None, :]
            z_up = hi[:, inverse] + scores[None, :]
            lower[block], upper[block] = collapse_inverted(
                corrected_lower_quantile_rows(z_low, p.alpha),
                corrected_upper_quantile_rows(z_up, p.alpha),
            )
    return IntervalBatch.build(lower=lower, upper=upper, masks=M, cal_subset_sizes=n_cal)


@typechecked
def mda_nested_interval(
    p: MdaPipeline, row: NDArray[np.float64], m: MaskPattern
) -> PredictionInterval:
    bags = nested_bags(p, row, m)
    lower, upper = bags.interval(p.alpha)
    return PredictionInterval(
        lower=lower,
        upper=upper,
        mask_used=m,
        cal_subset_size=bags.size,
        degenerate=math.isinf(lower) or math.isinf(upper),
    )


class PatternChoiceMode(Enum):
    DEFAULT = "default"
    FIXED = "fixed"
    RANDOM = "random"


class PatternChoice(StrictBaseModel):
    """
    Which augmented mask the partitioned variant keeps.

    default: the test mask itself when some calibration mask is included in
    it, else the smallest occurring augmented mask (ties: larger sub-bag,
    then bitstring). fixed: `mask`, which must include the test mask.
    random: an occurring augmented mask drawn with probability proportional
    to its sub-bag size.
    """

    mode: PatternChoiceMode = PatternChoiceMode.DEFAULT
    mask: Optional[MaskPattern] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check(self) -> Self:
        if (self.mode is PatternChoiceMode.FIXED) != (self.mask is not None):
            raise ValueError("a mask is given exactly when the mode is fixed")
        if self.mode is PatternChoiceMode.RANDOM and self.seed is None:
            raise ValueError("random pattern choice needs a seed")
        return self


def choose_pattern(
    p: MdaPipeline,
    m: MaskPattern,
    choice: PatternChoice,
    rng: Optional[np.random.Generator] = None,
) -> MaskPattern:
    if choice.mode is PatternChoiceMode.FIXED:
        assert choice.mask is not None
        if not mask_included(m, choice.mask):
            raise ValueError(f"chosen mask {choice.mask.key} does not include test mask {m.key}")
        return choice.mask
    if p.cal.size == 0:
        return m
    uniq, counts = np.unique(_augmented_masks(p, m), axis=0, return_counts=True)
    candidates = [MaskPattern.from_array(bits) for bits in uniq]
    if choice.mode is PatternChoiceMode.RANDOM:
        assert rng is not None
        return candidates[int(rng.choice(len(candidates), p=counts / counts.sum()))]
    if any(c == m for c in candidates):
        return m
    ranked = sorted(
        zip(candidates, counts),
        key=lambda pc: (pc[0].pattern_size, -int(pc[1]), pc[0].key),
    )
    return ranked[0][0]


def mda_nested_partitioned_interval_batch(
    p: MdaPipeline,
    X: NDArray[np.float64],
    M: NDArray[np.bool_],
    choice: Optional[PatternChoice] = None,
    seed: Optional[SeedLike] = None,
) -> IntervalBatch:
    """
    Nested restricted to the calibration rows whose augmented mask equals
    the chosen mask. Within the sub-bag every element shares that mask, so
    the bag quantiles reduce to the band under the chosen mask widened by
    the corrected quantile of the sub-bag scores. In random mode one
    generator (from `seed`, else the choice's seed) serves the rows in order.
    """
    _check_test(p, X, M)
    choice = choice or PatternChoice()
    rng = None
    if choice.mode is PatternChoiceMode.RANDOM:
        rng = as_generator(seed if seed is not None else int(choice.seed or 0))

    chosen = np.empty_like(M)
    for i in range(X.shape[0]):
        m = MaskPattern.from_array(M[i])
        chosen[i] = choose_pattern(p, m, choice, rng).as_array()

    lower = np.empty(X.shape[0])
    upper = np.empty(X.shape[0])
    sizes = np.zeros(X.shape[0], dtype=np.int64)
    # group by (test mask, chosen mask)
    for pair, rows in _groups(np.hstack([M, chosen])):
        m = MaskPattern(bits=pair.bits[: p.dimension])
        target = MaskPattern(bits=pair.bits[p.dimension :])
        aug = _augmented_masks(p, m)
        members = np.all(aug == target.as_array()[None, :], axis=1)
        n_sub = int(members.sum())
        q = math.inf
        if n_sub:
            X_cal = apply_masks(p.cal.features[members], aug[members])
            scores = p.score.scores(X_cal, aug[members], p.cal.responses[members])
            q = corrected_upper_quantile(scores, p.alpha)
        if math.isinf(q):
            logger.warning(
                f"Partitioned: sub-bag {target.key} has {n_sub} rows for mask {m.key}; interval is infinite"
            )
        masks = np.broadcast_to(target.as_array(), (rows.size, p.dimension)).copy()
        lo, hi = p.band.predict_band(apply_masks(X[rows], masks), masks)
        lower[rows], upper[rows] = widen(lo, hi, q)
        sizes[rows] = n_sub
    return IntervalBatch.build(lower=lower, upper=upper, masks=chosen, cal_subset_sizes=sizes)


@typechecked
def mda_nested_partitioned_interval(
    p: MdaPipeline,
    row: NDArray[np.float64],
    m: MaskPattern,
    pattern_choice: Optional[PatternChoice] = None,
) -> PredictionInterval:
    return mda_nested_partitioned_interval_batch(
        p, row[None, :], m.as_array()[None, :], pattern_choice
    )[0]
