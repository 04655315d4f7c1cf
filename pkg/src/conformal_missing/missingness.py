"""
Mask generation under MCAR, mask algebra and per-pattern test sampling.

Masks travel as (n, d) boolean arrays; single masks as MaskPattern.
"""

import itertools
import logging
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from typeguard import typechecked
from typing_extensions import Self

from .data_model import (
    MISSING_SENTINEL,
    DimensionMismatchError,
    MaskedDataset,
    MaskPattern,
    SeedLike,
    as_generator,
)
from .validation_helpers import StrictBaseModel, check_rate

logger = logging.getLogger(__name__)


class McarSpec(StrictBaseModel):
    """Each eligible cell is masked independently with probability `rate`."""

    rate: float
    column_subset: Optional[tuple[int, ...]] = None

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_rate(self.rate)
        if self.column_subset is not None:
            if any(j < 0 for j in self.column_subset):
                raise ValueError(f"negative column index in {self.column_subset}")
            if len(set(self.column_subset)) != len(self.column_subset):
                raise ValueError(f"repeated column index in {self.column_subset}")
        return self

    def eligible(self, d: int) -> NDArray[np.bool_]:
        if self.column_subset is None:
            return np.ones(d, dtype=bool)
        if self.column_subset and max(self.column_subset) >= d:
            raise ValueError(
                f"column index {max(self.column_subset)} out of range for d={d}"
            )
        out = np.zeros(d, dtype=bool)
        out[list(self.column_subset)] = True
        return out


@typechecked
def gen_mcar_masks(n: int, d: int, spec: McarSpec, seed: SeedLike) -> NDArray[np.bool_]:
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = as_generator(seed)
    draws = rng.random((n, d)) < spec.rate
    return draws & spec.eligible(d)[None, :]


@typechecked
def inject_mcar(
    data: MaskedDataset, columns: Optional[Sequence[int]], p: float, seed: SeedLike
) -> MaskedDataset:
    """Mask extra cells of `columns` (every column when None) at rate p.

    Cells already missing stay missing.
    """
    subset = None if columns is None else tuple(int(c) for c in columns)
    spec = McarSpec(rate=p, column_subset=subset)
    if data.size == 0:
        return data
    return data.with_extra_masks(gen_mcar_masks(data.size, data.dimension, spec, seed))


def _check_pair(a: MaskPattern, b: MaskPattern) -> None:
    if a.dimension != b.dimension:
        raise DimensionMismatchError(
            f"mask lengths differ: {a.dimension} vs {b.dimension}"
        )


@typechecked
def mask_included(a: MaskPattern, b: MaskPattern) -> bool:
    """True iff every missing coordinate of `a` is also missing in `b`."""
    _check_pair(a, b)
    return all(bb or not ba for ba, bb in zip(a.bits, b.bits))


@typechecked
def mask_max(a: MaskPattern, b: MaskPattern) -> MaskPattern:
    _check_pair(a, b)
    return MaskPattern(bits=tuple(ba or bb for ba, bb in zip(a.bits, b.bits)))


def masks_included_in(masks: NDArray[np.bool_], m: MaskPattern) -> NDArray[np.bool_]:
    """Row-wise mask_included(masks[i], m)."""
    if masks.ndim != 2 or masks.shape[1] != m.dimension:
        raise DimensionMismatchError(
            f"masks of shape {masks.shape} against a mask of length {m.dimension}"
        )
    return ~np.any(masks & ~m.as_array()[None, :], axis=1)


@typechecked
def apply_mask(row: NDArray[np.float64], m: MaskPattern) -> NDArray[np.float64]:
    if row.shape != (m.dimension,):
        raise DimensionMismatchError(
            f"row of shape {row.shape} against a mask of length {m.dimension}"
        )
    return np.where(m.as_array(), MISSING_SENTINEL, row)


def apply_masks(X: NDArray[np.float64], M: NDArray[np.bool_]) -> NDArray[np.float64]:
    if X.shape != M.shape:
        raise DimensionMismatchError(f"features {X.shape} vs masks {M.shape}")
    return np.where(M, MISSING_SENTINEL, X)


def pattern_sizes(masks: NDArray[np.bool_]) -> NDArray[np.int64]:
    return masks.sum(axis=1).astype(np.int64)


@typechecked
def enumerate_masks(d: int, include_all_missing: bool = True) -> list[MaskPattern]:
    """All 2^d masks ordered by pattern size, then by bitstring."""
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    out = [
        MaskPattern(bits=bits)
        for bits in itertools.product((False, True), repeat=d)
        if include_all_missing or not all(bits)
    ]
    return sorted(out, key=lambda p: (p.pattern_size, p.key))


def _uniform_size_masks(
    d: int, size: int, count: int, rng: np.random.Generator
) -> NDArray[np.bool_]:
    order = rng.random((count, d)).argsort(axis=1)
    out = np.zeros((count, d), dtype=bool)
    if size:
        np.put_along_axis(out, order[:, :size], True, axis=1)
    return out


@typechecked
def sample_eval_patterns(
    d: int,
    per_size: int,
    mechanism_masks: Optional[NDArray[np.bool_]],
    seed: SeedLike,
    include_all_missing: bool = False,
) -> NDArray[np.bool_]:
    """
    Draw `per_size` evaluation masks for every pattern size, sampling with
    replacement from the empirical masks of that size. Sizes absent from the
    empirical sample (or every size when `mechanism_masks` is None) fall back
    to masks uniform over the size-s patterns.

    Sizes run over 0..d-1, plus d when `include_all_missing` is set.
    """
    if per_size < 1:
        raise ValueError(f"per_size must be positive, got {per_size}")
    if mechanism_masks is not None and (
        mechanism_masks.ndim != 2 or mechanism_masks.shape[1] != d
    ):
        raise DimensionMismatchError(
            f"mechanism masks of shape {mechanism_masks.shape} for d={d}"
        )
    rng = as_generator(seed)
    top = d if include_all_missing else d - 1
    sizes = None if mechanism_masks is None else pattern_sizes(mechanism_masks)

    blocks = []
    for s in range(top + 1):
        pool = None
        if mechanism_masks is not None and sizes is not None:
            pool = mechanism_masks[sizes == s]
        if pool is not None and pool.shape[0] > 0:
            picks = rng.integers(0, pool.shape[0], size=per_size)
            blocks.append(pool[picks])
        else:
            if mechanism_masks is not None:
                logger.warning(
                    f"No empirical mask of size {s}; sampling size-{s} masks uniformly"
                )
            blocks.append(_uniform_size_masks(d, s, per_size, rng))
    return np.concatenate(blocks, axis=0)
