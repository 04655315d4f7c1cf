"""
Deterministic imputation functions that leave observed coordinates untouched.

Three kinds are available: a constant fill, the column mean, and iterative
ridge (chained column-wise ridge regressions started from the mean fill).
A fitted Imputer is immutable and works on rows it never saw.
"""

import logging
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from sklearn.linear_model import Ridge
from typeguard import typechecked
from typing_extensions import Self

from .data_model import DimensionMismatchError, MaskedDataset, MaskPattern
from .validation_helpers import ArrayField, StrictBaseModel, freeze_array

logger = logging.getLogger(__name__)

RELATIVE_RIDGE_PENALTY = 1e-3
MIN_RIDGE_PENALTY = 1e-12


class FullyMissingColumnError(ValueError):
    def __init__(self, column: int):
        super().__init__(f"column {column} has no observed value to fit from")
        self.column = column

    def __reduce__(self) -> tuple[type, tuple[int]]:
        return (type(self), (self.column,))


class ImputerKind(Enum):
    CONSTANT = "constant"
    MEAN = "mean"
    ITERATIVE_RIDGE = "iterative_ridge"


class ImputerHyper(StrictBaseModel):
    # None selects the per-column default 1e-3 * variance.
    ridge_penalty: Optional[float] = None
    max_sweeps: int = 10
    tol: float = 1e-6
    fill_value: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.ridge_penalty is not None and not self.ridge_penalty > 0:
            raise ValueError(f"ridge penalty must be positive, got {self.ridge_penalty}")
        if self.max_sweeps < 1:
            raise ValueError(f"max_sweeps must be at least 1, got {self.max_sweeps}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        return self


class Imputer(StrictBaseModel):
    """
    A fitted imputation function.

    `fill` holds the constant (constant kind) or the column means (mean and
    iterative ridge). For iterative ridge, `coefs[j]` regresses column j on
    the other columns (zero diagonal) with intercept `intercepts[j]`.
    """

    kind: ImputerKind
    fill: ArrayField
    coefs: Optional[ArrayField] = None
    intercepts: Optional[ArrayField] = None
    penalties: Optional[ArrayField] = None
    sweeps_run: int = 0
    hyper: ImputerHyper = ImputerHyper()

    @model_validator(mode="after")
    def _check(self) -> Self:
        d = self.fill.shape[0]
        if self.fill.shape != (d,) or d == 0:
            raise DimensionMismatchError(f"fill must be a non-empty vector, got {self.fill.shape}")
        if self.kind is ImputerKind.ITERATIVE_RIDGE:
            if self.coefs is None or self.intercepts is None:
                raise ValueError("iterative ridge imputer needs coefficients")
            if self.coefs.shape != (d, d) or self.intercepts.shape != (d,):
                raise DimensionMismatchError("ridge coefficients do not match the dimension")
        for name in ("fill", "coefs", "intercepts", "penalties"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, freeze_array(value))
        return self

    @property
    def dimension(self) -> int:
        return int(self.fill.shape[0])

    def impute(self, row: NDArray[np.float64], m: MaskPattern) -> NDArray[np.float64]:
        if row.shape != (self.dimension,) or m.dimension != self.dimension:
            raise DimensionMismatchError(
                f"imputer of dimension {self.dimension} got row {row.shape} and mask of length {m.dimension}"
            )
        return self.impute_batch(row[None, :], m.as_array()[None, :])[0]

    def impute_batch(
        self, X: NDArray[np.float64], M: NDArray[np.bool_]
    ) -> NDArray[np.float64]:
        """Row-wise `impute`; each row converges on its own."""
        if X.ndim != 2 or X.shape != M.shape or X.shape[1] != self.dimension:
            raise DimensionMismatchError(
                f"imputer of dimension {self.dimension} got features {X.shape} and masks {M.shape}"
            )
        Z = np.where(M, self.fill[None, :], X)
        if self.kind is not ImputerKind.ITERATIVE_RIDGE or self.dimension == 1:
            return Z
        assert self.coefs is not None and self.intercepts is not None

        active = M.any(axis=1)
        for _ in range(self.hyper.max_sweeps):
            if not active.any():
                break
            before = Z[active].copy()
            for j in range(self.dimension):
                rows = M[:, j] & active
                if rows.any():
                    Z[rows, j] = self.intercepts[j] + Z[rows] @ self.coefs[j]
            change = np.abs(Z[active] - before).max(axis=1)
            still = change >= self.hyper.tol
            idx = np.flatnonzero(active)
            active[idx[~still]] = False
        return Z


def _observed_means(data: MaskedDataset) -> NDArray[np.float64]:
    X, M = data.features, data.masks
    counts = (~M).sum(axis=0)
    for j in np.flatnonzero(counts == 0):
        raise FullyMissingColumnError(int(j))
    return np.where(M, 0.0, X).sum(axis=0) / counts


def _fit_iterative_ridge(data: MaskedDataset, hyper: ImputerHyper) -> Imputer:
    X, M = data.features, data.masks
    n, d = X.shape
    means = _observed_means(data)
    coefs = np.zeros((d, d))
    intercepts = means.copy()
    penalties = np.zeros(d)
    for j in range(d):
        observed = X[~M[:, j], j]
        if hyper.ridge_penalty is not None:
            penalties[j] = hyper.ridge_penalty
        else:
            penalties[j] = max(RELATIVE_RIDGE_PENALTY * float(np.var(observed)), MIN_RIDGE_PENALTY)

    Z = np.where(M, means[None, :], X)
    sweeps = 0
    if d > 1:
        for sweeps in range(1, hyper.max_sweeps + 1):
            before = Z.copy()
            for j in range(d):
                obs = ~M[:, j]
                others = np.arange(d) != j
                model = Ridge(alpha=float(penalties[j]), solver="cholesky")
                model.fit(Z[obs][:, others], X[obs, j])
                coefs[j, others] = model.coef_
                intercepts[j] = float(model.intercept_)
                if M[:, j].any():
                    Z[M[:, j], j] = model.predict(Z[M[:, j]][:, others])
            change = float(np.abs(Z - before).max()) if n else 0.0
            logger.debug(f"iterative ridge sweep {sweeps}: max change {change:.3g}")
            if change < hyper.tol:
                break
        else:
            logger.info(
                f"iterative ridge stopped after {hyper.max_sweeps} sweeps without reaching tol={hyper.tol}"
            )

    return Imputer(
        kind=ImputerKind.ITERATIVE_RIDGE,
        fill=means,
        coefs=coefs,
        intercepts=intercepts,
        penalties=penalties,
        sweeps_run=sweeps,
        hyper=hyper,
    )


@typechecked
def fit_imputer(
    kind: ImputerKind, data: MaskedDataset, hyper: Optional[ImputerHyper] = None
) -> Imputer:
    hyper = hyper or ImputerHyper()
    if data.size == 0:
        raise ValueError("cannot fit an imputer on zero rows")
    if kind is ImputerKind.CONSTANT:
        return Imputer(
            kind=kind, fill=np.full(data.dimension, hyper.fill_value), hyper=hyper
        )
    if kind is ImputerKind.MEAN:
        return Imputer(kind=kind, fill=_observed_means(data), hyper=hyper)
    return _fit_iterative_ridge(data, hyper)


@typechecked
def impute(imp: Imputer, row: NDArray[np.float64], m: MaskPattern) -> NDArray[np.float64]:
    return imp.impute(row, m)


@typechecked
def impute_batch(
    imp: Imputer, X: NDArray[np.float64], M: NDArray[np.bool_]
) -> NDArray[np.float64]:
    return imp.impute_batch(X, M)
