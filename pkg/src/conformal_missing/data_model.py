"""
Core value types shared across the package, plus the train/calibration split.

Masks follow the convention 1 (True) = missing. Missing feature cells hold
NaN, but the mask matrix is the only source of truth: readers consult the
mask, never the sentinel. Indices are 0-based.
"""

import logging
import math
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from typeguard import typechecked
from typing_extensions import Self

from .validation_helpers import (
    ArrayField,
    ExtendedRealModel,
    StrictBaseModel,
    freeze_array,
)

logger = logging.getLogger(__name__)

MISSING_SENTINEL = float("nan")

SeedLike = Union[int, np.random.Generator]


class DimensionMismatchError(ValueError):
    pass


@typechecked
def as_generator(seed: SeedLike) -> np.random.Generator:
    """Turn an integer seed into a fresh Generator; pass Generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class MaskPattern(StrictBaseModel):
    """A length-d missingness pattern; True means the coordinate is missing."""

    bits: tuple[bool, ...]

    @model_validator(mode="after")
    def _check_bits(self) -> Self:
        if len(self.bits) == 0:
            raise ValueError("a mask pattern needs at least one coordinate")
        return self

    @property
    def dimension(self) -> int:
        return len(self.bits)

    @property
    def pattern_size(self) -> int:
        return sum(self.bits)

    @property
    def key(self) -> str:
        """Bitstring such as '010', used as a group key in reports."""
        return "".join("1" if b else "0" for b in self.bits)

    def missing_index(self) -> NDArray[np.intp]:
        return np.flatnonzero(self.as_array())

    def observed_index(self) -> NDArray[np.intp]:
        return np.flatnonzero(~self.as_array())

    def as_array(self) -> NDArray[np.bool_]:
        return np.array(self.bits, dtype=bool)

    @classmethod
    def from_array(cls, bits: Any) -> "MaskPattern":
        arr = np.asarray(bits)
        if arr.ndim != 1:
            raise DimensionMismatchError(
                f"a mask pattern is one-dimensional, got shape {arr.shape}"
            )
        return cls(bits=tuple(bool(b) for b in arr))

    @classmethod
    def from_key(cls, key: str) -> "MaskPattern":
        if not key or set(key) - {"0", "1"}:
            raise ValueError(f"Invalid mask key: {key!r}")
        return cls(bits=tuple(c == "1" for c in key))

    @classmethod
    def all_observed(cls, d: int) -> "MaskPattern":
        return cls(bits=(False,) * d)

    @classmethod
    def all_missing(cls, d: int) -> "MaskPattern":
        return cls(bits=(True,) * d)

    def __str__(self) -> str:
        return self.key


class SplitIndices(StrictBaseModel):
    """Disjoint proper-training and calibration index sets."""

    train: tuple[int, ...]
    cal: tuple[int, ...]

    @model_validator(mode="after")
    def _check_disjoint(self) -> Self:
        if not self.train or not self.cal:
            raise ValueError("both the training and calibration sets must be nonempty")
        if min(self.train + self.cal) < 0:
            raise ValueError("split indices must be nonnegative")
        if set(self.train) & set(self.cal):
            raise ValueError("training and calibration indices overlap")
        if len(set(self.train)) != len(self.train) or len(set(self.cal)) != len(
            self.cal
        ):
            raise ValueError("split indices must not repeat")
        return self

    def train_array(self) -> NDArray[np.intp]:
        return np.asarray(self.train, dtype=np.intp)

    def cal_array(self) -> NDArray[np.intp]:
        return np.asarray(self.cal, dtype=np.intp)


class MaskedDataset(StrictBaseModel):
    """
    Features with explicit missing cells, the mask matrix and the responses.

    `hidden_features` optionally keeps the true values under masks that
    were injected artificially, so semi-synthetic evaluation can re-mask
    rows without losing ground truth. Cells missing in the original source
    stay NaN there too.
    """

    features: ArrayField
    masks: ArrayField
    responses: ArrayField
    hidden_features: Optional[ArrayField] = None
    feature_names: Optional[tuple[str, ...]] = None
    split: Optional[SplitIndices] = None

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        X, M, y = self.features, self.masks, self.responses
        if X.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-D, got shape {X.shape}")
        if M.shape != X.shape:
            raise DimensionMismatchError(
                f"masks shape {M.shape} does not match features shape {X.shape}"
            )
        if y.shape != (X.shape[0],):
            raise DimensionMismatchError(
                f"responses shape {y.shape} does not match {X.shape[0]} rows"
            )
        if M.dtype != np.bool_:
            raise TypeError(f"masks must be boolean, got {M.dtype}")
        if not np.all(np.isfinite(X[~M])):
            raise ValueError("observed feature cells must be finite")
        if not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite")
        if self.hidden_features is not None and self.hidden_features.shape != X.shape:
            raise DimensionMismatchError(
                f"hidden_features shape {self.hidden_features.shape} does not match {X.shape}"
            )
        if self.feature_names is not None and len(self.feature_names) != X.shape[1]:
            raise DimensionMismatchError(
                f"{len(self.feature_names)} feature names for {X.shape[1]} columns"
            )
        if self.split is not None:
            top = max(self.split.train + self.split.cal)
            if top >= X.shape[0]:
                raise ValueError(f"split index {top} out of range for {X.shape[0]} rows")

        features = np.array(X, dtype=np.float64, copy=True)
        features[M] = MISSING_SENTINEL
        object.__setattr__(self, "features", freeze_array(features))
        object.__setattr__(self, "masks", freeze_array(M))
        object.__setattr__(self, "responses", freeze_array(y))
        if self.hidden_features is not None:
            object.__setattr__(
                self, "hidden_features", freeze_array(self.hidden_features)
            )
        return self

    @classmethod
    def build(
        cls,
        features: Any,
        masks: Any,
        responses: Any,
        **kwargs: Any,
    ) -> "MaskedDataset":
        """Coerce array-likes to the dtypes the strict model expects."""
        return cls(
            features=np.asarray(features, dtype=np.float64),
            masks=np.asarray(masks, dtype=bool),
            responses=np.asarray(responses, dtype=np.float64),
            **kwargs,
        )

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    def mask_patterns(self) -> list[MaskPattern]:
        return [MaskPattern.from_array(row) for row in self.masks]

    def observed_value(self, row: int, column: int) -> float:
        if self.masks[row, column]:
            raise ValueError(f"cell ({row}, {column}) is missing")
        return float(self.features[row, column])

    def complete_features(self) -> NDArray[np.float64]:
        """Features with injected masks undone where the true value is known."""
        if self.hidden_features is None:
            return self.features
        return np.where(np.isnan(self.hidden_features), self.features, self.hidden_features)

    def subset(self, index: Sequence[int] | NDArray[np.intp]) -> "MaskedDataset":
        idx = np.asarray(index, dtype=np.intp)
        return MaskedDataset(
            features=self.features[idx],
            masks=self.masks[idx],
            responses=self.responses[idx],
            hidden_features=(
                None if self.hidden_features is None else self.hidden_features[idx]
            ),
            feature_names=self.feature_names,
        )

    def with_split(self, split: SplitIndices) -> "MaskedDataset":
        return MaskedDataset(
            features=self.features,
            masks=self.masks,
            responses=self.responses,
            hidden_features=self.hidden_features,
            feature_names=self.feature_names,
            split=split,
        )

    def with_extra_masks(self, extra: NDArray[np.bool_]) -> "MaskedDataset":
        """
        Mask additional cells. New masks are the elementwise max of the old
        masks and `extra`; true values under newly masked cells move into
        `hidden_features`.
        """
        if extra.shape != self.masks.shape:
            raise DimensionMismatchError(
                f"extra masks shape {extra.shape} does not match {self.masks.shape}"
            )
        hidden = self.complete_features()
        return MaskedDataset(
            features=self.features,
            masks=self.masks | extra,
            responses=self.responses,
            hidden_features=hidden,
            feature_names=self.feature_names,
            split=self.split,
        )

    def train_part(self) -> "MaskedDataset":
        if self.split is None:
            raise ValueError("dataset carries no split")
        return self.subset(self.split.train_array())

    def cal_part(self) -> "MaskedDataset":
        if self.split is None:
            raise ValueError("dataset carries no split")
        return self.subset(self.split.cal_array())


class PredictionInterval(ExtendedRealModel):
    """A closed prediction interval [lower, upper], possibly unbounded."""

    lower: float
    upper: float
    mask_used: MaskPattern
    cal_subset_size: int
    degenerate: bool = False

    @model_validator(mode="after")
    def _check_bounds(self) -> Self:
        if math.isnan(self.lower) or math.isnan(self.upper):
            raise ValueError("interval bounds must not be NaN")
        if self.lower > self.upper:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")
        if self.lower == math.inf or self.upper == -math.inf:
            raise ValueError("interval must not be empty at infinity")
        if self.cal_subset_size < 0:
            raise ValueError("cal_subset_size must be nonnegative")
        return self

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.lower) or math.isinf(self.upper)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


class IntervalBatch(StrictBaseModel):
    """Column-oriented batch of intervals; row i is one PredictionInterval."""

    lower: ArrayField
    upper: ArrayField
    masks: ArrayField
    cal_subset_sizes: ArrayField

    @model_validator(mode="after")
    def _check_columns(self) -> Self:
        n = self.lower.shape[0]
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise DimensionMismatchError("lower and upper must be 1-D of equal length")
        if self.masks.ndim != 2 or self.masks.shape[0] != n:
            raise DimensionMismatchError(f"masks shape {self.masks.shape} for {n} intervals")
        if self.cal_subset_sizes.shape != (n,):
            raise DimensionMismatchError("cal_subset_sizes must have one entry per interval")
        if np.isnan(self.lower).any() or np.isnan(self.upper).any():
            raise ValueError("interval bounds must not be NaN")
        if np.any(self.lower > self.upper):
            bad = int(np.flatnonzero(self.lower > self.upper)[0])
            raise ValueError(f"interval {bad} has lower bound above upper bound")
        for name in ("lower", "upper", "masks", "cal_subset_sizes"):
            object.__setattr__(self, name, freeze_array(getattr(self, name)))
        return self

    @classmethod
    def build(
        cls,
        lower: Any,
        upper: Any,
        masks: Any,
        cal_subset_sizes: Any,
    ) -> "IntervalBatch":
        lower_a = np.asarray(lower, dtype=np.float64)
        return cls(
            lower=lower_a,
            upper=np.asarray(upper, dtype=np.float64),
            masks=np.asarray(masks, dtype=bool).reshape(lower_a.shape[0], -1),
            cal_subset_sizes=np.broadcast_to(
                np.asarray(cal_subset_sizes, dtype=np.int64), lower_a.shape
            ).copy(),
        )

    @classmethod
    def from_intervals(cls, intervals: Sequence[PredictionInterval]) -> "IntervalBatch":
        if not intervals:
            raise ValueError("cannot build a batch from zero intervals")
        return cls.build(
            lower=[iv.lower for iv in intervals],
            upper=[iv.upper for iv in intervals],
            masks=[iv.mask_used.bits for iv in intervals],
            cal_subset_sizes=[iv.cal_subset_size for iv in intervals],
        )

    @classmethod
    def concatenate(cls, batches: Sequence["IntervalBatch"]) -> "IntervalBatch":
        return cls.build(
            lower=np.concatenate([b.lower for b in batches]),
            upper=np.concatenate([b.upper for b in batches]),
            masks=np.concatenate([b.masks for b in batches]),
            cal_subset_sizes=np.concatenate([b.cal_subset_sizes for b in batches]),
        )

    def __len__(self) -> int:
        return int(self.lower.shape[0])

    def __getitem__(self, i: int) -> PredictionInterval:
        lower, upper = float(self.lower[i]), float(self.upper[i])
        return PredictionInterval(
            lower=lower,
            upper=upper,
            mask_used=MaskPattern.from_array(self.masks[i]),
            cal_subset_size=int(self.cal_subset_sizes[i]),
            degenerate=math.isinf(lower) or math.isinf(upper),
        )

    def intervals(self) -> Iterator[PredictionInterval]:
        for i in range(len(self)):
            yield self[i]

    @property
    def lengths(self) -> NDArray[np.float64]:
        return np.asarray(self.upper - self.lower, dtype=np.float64)

    @property
    def infinite(self) -> NDArray[np.bool_]:
        return np.isinf(self.lower) | np.isinf(self.upper)


@typechecked
def split_train_cal(n: int, cal_fraction: float, seed: SeedLike) -> SplitIndices:
    """
    Randomly split row indices 0..n-1 into proper-training and calibration sets.

    |cal| = round(cal_fraction * n), drawn uniformly without replacement and
    deterministic given the seed. Both index sets are returned sorted.
    """
    if n < 2:
        raise ValueError(f"need at least 2 rows to split, got n={n}")
    if not 0.0 < cal_fraction < 1.0:
        raise ValueError(f"cal_fraction must lie in (0, 1), got {cal_fraction}")

    n_cal = int(round(cal_fraction * n))
    if n_cal == 0 or n_cal == n:
        raise ValueError(
            f"cal_fraction={cal_fraction} with n={n} leaves an empty side ({n_cal} calibration rows)"
        )

    perm = as_generator(seed).permutation(n)
    cal = np.sort(perm[:n_cal])
    train = np.sort(perm[n_cal:])
    return SplitIndices(
        train=tuple(int(i) for i in train), cal=tuple(int(i) for i in cal)
    )


@typechecked
def save_dataset_npz(data: MaskedDataset, path: Path) -> None:
    """Write a dataset to a compressed .npz file; load_dataset_npz reads it back bit-for-bit."""
    payload: dict[str, Any] = {
        "features": data.features,
        "masks": data.masks,
        "responses": data.responses,
    }
    if data.hidden_features is not None:
        payload["hidden_features"] = data.hidden_features
    if data.feature_names is not None:
        payload["feature_names"] = np.array(data.feature_names, dtype=str)
    if data.split is not None:
        payload["split_train"] = data.split.train_array()
        payload["split_cal"] = data.split.cal_array()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez_compressed(f, **payload)


@typechecked
def load_dataset_npz(path: Path) -> MaskedDataset:
    with np.load(path, allow_pickle=False) as z:
        split = None
        if "split_train" in z:
            split = SplitIndices(
                train=tuple(int(i) for i in z["split_train"]),
                cal=tuple(int(i) for i in z["split_cal"]),
            )
        return MaskedDataset(
            features=z["features"].astype(np.float64),
            masks=z["masks"].astype(bool),
            responses=z["responses"].astype(np.float64),
            hidden_features=(
                z["hidden_features"].astype(np.float64)
                if "hidden_features" in z
                else None
            ),
            feature_names=(
                tuple(str(s) for s in z["feature_names"]) if "feature_names" in z else None
            ),
            split=split,
        )
