"""
Gaussian-linear data model and its closed-form oracle.

Covariates are Gaussian given the mask (one shared mean/covariance unless
per-mask overrides are supplied), Y = beta^T X + eps with eps ~ N(0, sigma^2).
Conditioning on the observed coordinates uses Cholesky solves on the
observed block; no explicit inverse is formed.
"""

import logging
import math
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm
from typeguard import typechecked
from typing_extensions import Self

from .data_model import (
    DimensionMismatchError,
    IntervalBatch,
    MaskedDataset,
    MaskPattern,
    PredictionInterval,
    SeedLike,
    as_generator,
)
from .missingness import McarSpec, gen_mcar_masks
from .validation_helpers import ArrayField, StrictBaseModel, check_alpha, freeze_array

logger = logging.getLogger(__name__)

# Regression coefficients of the d=10 simulation design; smaller designs use a prefix.
PUBLISHED_COEFFICIENTS = (1.0, 2.0, -1.0, 3.0, -0.5, -1.0, 0.3, 1.7, 0.4, -0.3)

SYMMETRY_TOL = 1e-12
EIGEN_TOL = 1e-10
JITTER = 1e-10
MAX_CONDITION = 1e12


class SingularCovarianceError(ValueError):
    pass


def _check_moments(mean: NDArray[np.float64], cov: NDArray[np.float64], d: int) -> None:
    if mean.shape != (d,) or cov.shape != (d, d):
        raise DimensionMismatchError(
            f"mean {mean.shape} and covariance {cov.shape} do not match d={d}"
        )
    if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
        raise ValueError("mean and covariance must be finite")
    if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL:
        raise ValueError("covariance is not symmetric")
    lowest = float(np.linalg.eigvalsh(cov).min())
    if lowest < -EIGEN_TOL:
        raise ValueError(f"covariance is not positive semi-definite (eigenvalue {lowest:.3g})")


class MaskMoments(StrictBaseModel):
    """Covariate mean and covariance for rows carrying one particular mask."""

    mask: MaskPattern
    mean: ArrayField
    cov: ArrayField

    @model_validator(mode="after")
    def _check(self) -> Self:
        _check_moments(self.mean, self.cov, self.mask.dimension)
        object.__setattr__(self, "mean", freeze_array(self.mean))
        object.__setattr__(self, "cov", freeze_array(self.cov))
        return self


class GlmParams(StrictBaseModel):
    beta: ArrayField
    noise_std: float
    mean: ArrayField
    cov: ArrayField
    overrides: tuple[MaskMoments, ...] = ()

    @model_validator(mode="after")
    def _check(self) -> Self:
        d = self.beta.shape[0]
        if self.beta.shape != (d,) or d == 0:
            raise DimensionMismatchError(f"beta must be a non-empty vector, got {self.beta.shape}")
        if not self.noise_std >= 0:
            raise ValueError(f"noise std must be nonnegative, got {self.noise_std}")
        _check_moments(self.mean, self.cov, d)
        keys = [o.mask.key for o in self.overrides]
        if len(set(keys)) != len(keys):
            raise ValueError("a mask appears twice among the overrides")
        if any(o.mask.dimension != d for o in self.overrides):
            raise DimensionMismatchError("override mask length differs from d")
        for name in ("beta", "mean", "cov"):
            object.__setattr__(self, name, freeze_array(getattr(self, name)))
        return self

    @property
    def dimension(self) -> int:
        return int(self.beta.shape[0])

    def moments_for(self, m: MaskPattern) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        for o in self.overrides:
            if o.mask == m:
                return o.mean, o.cov
        return self.mean, self.cov

    @classmethod
    def equicorrelated(
        cls,
        d: int,
        phi: float = 0.8,
        noise_std: float = 1.0,
        mean_value: float = 1.0,
        beta: Optional[tuple[float, ...]] = None,
    ) -> "GlmParams":
        """Sigma = phi * 11^T + (1 - phi) * I, mu = mean_value * 1."""
        if beta is None:
            if not 1 <= d <= len(PUBLISHED_COEFFICIENTS):
                raise ValueError(
                    f"default coefficients exist for 1 <= d <= {len(PUBLISHED_COEFFICIENTS)}, got d={d}"
                )
            beta = PUBLISHED_COEFFICIENTS[:d]
        if not 0.0 <= phi <= 1.0:
            raise ValueError(f"phi must lie in [0, 1], got {phi}")
        return cls(
            beta=np.asarray(beta, dtype=np.float64),
            noise_std=float(noise_std),
            mean=np.full(d, float(mean_value)),
            cov=phi * np.ones((d, d)) + (1.0 - phi) * np.eye(d),
        )


class ConditionalGaussian(StrictBaseModel):
    """Distribution of the missing coordinates given the observed ones."""

    missing_index: tuple[int, ...]
    mean: ArrayField
    cov: ArrayField

    @model_validator(mode="after")
    def _freeze(self) -> Self:
        object.__setattr__(self, "mean", freeze_array(self.mean))
        object.__setattr__(self, "cov", freeze_array(self.cov))
        return self


@typechecked
def std_normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return float(norm.ppf(p))


def _factor(block: NDArray[np.float64]) -> tuple[NDArray[np.float64], bool]:
    if np.linalg.cond(block) > MAX_CONDITION:
        raise SingularCovarianceError(
            f"observed covariance block is numerically singular (condition {np.linalg.cond(block):.3g})"
        )
    try:
        return cho_factor(block, lower=True)  # type: ignore[no-any-return]
    except LinAlgError:
        logger.warning("Cholesky factorization failed; retrying with diagonal jitter")
    try:
        return cho_factor(block + JITTER * np.eye(block.shape[0]), lower=True)  # type: ignore[no-any-return]
    except LinAlgError as exc:
        raise SingularCovarianceError("observed covariance block is singular") from exc


def _regression_operator(
    params: GlmParams, m: MaskPattern
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """
    For mask m return (mu, A, cond_cov) with mu the covariate mean, A the
    matrix sending x_obs - mu_obs to the conditional mean shift of the
    missing block, and cond_cov the Schur complement.
    """
    if m.dimension != params.dimension:
        raise DimensionMismatchError(
            f"mask of length {m.dimension} for d={params.dimension}"
        )
    mu, S = params.moments_for(m)
    mis, obs = m.missing_index(), m.observed_index()
    if obs.size == 0:
        return mu, np.zeros((mis.size, 0)), S[np.ix_(mis, mis)].copy()
    if mis.size == 0:
        return mu, np.zeros((0, obs.size)), np.zeros((0, 0))
    factor = _factor(S[np.ix_(obs, obs)])
    S_om = S[np.ix_(obs, mis)]
    A = cho_solve(factor, S_om).T
    cond = S[np.ix_(mis, mis)] - S[np.ix_(mis, obs)] @ cho_solve(factor, S_om)
    return mu, A, 0.5 * (cond + cond.T)


@typechecked
def conditional_gaussian(
    params: GlmParams, m: MaskPattern, x_obs: NDArray[np.float64]
) -> ConditionalGaussian:
    mis, obs = m.missing_index(), m.observed_index()
    if x_obs.shape != (obs.size,):
        raise DimensionMismatchError(
            f"expected {obs.size} observed values, got shape {x_obs.shape}"
        )
    mu, A, cond = _regression_operator(params, m)
    mean = mu[mis] + A @ (x_obs - mu[obs])
    return ConditionalGaussian(
        missing_index=tuple(int(i) for i in mis), mean=mean, cov=cond
    )


def _half_width_unit(params: GlmParams, m: MaskPattern) -> float:
    _, _, cond = _regression_operator(params, m)
    beta_mis = params.beta[m.missing_index()]
    variance = float(beta_mis @ cond @ beta_mis) + params.noise_std**2
    return math.sqrt(max(variance, 0.0))


@typechecked
def oracle_length(params: GlmParams, m: MaskPattern, alpha: float) -> float:
    """Length of the oracle interval for mask m; it does not depend on x_obs."""
    check_alpha(alpha)
    return 2.0 * std_normal_quantile(1.0 - alpha / 2.0) * _half_width_unit(params, m)


@typechecked
def oracle_mean(params: GlmParams, m: MaskPattern, x_obs: NDArray[np.float64]) -> float:
    """E[Y | X_obs = x_obs, M = m]."""
    cg = conditional_gaussian(params, m, x_obs)
    beta_obs = params.beta[m.observed_index()]
    beta_mis = params.beta[m.missing_index()]
    return float(beta_obs @ x_obs + beta_mis @ cg.mean)


@typechecked
def oracle_interval(
    params: GlmParams, m: MaskPattern, x_obs: NDArray[np.float64], alpha: float
) -> PredictionInterval:
    center = oracle_mean(params, m, x_obs)
    half = oracle_length(params, m, alpha) / 2.0
    return PredictionInterval(
        lower=center - half, upper=center + half, mask_used=m, cal_subset_size=0
    )


def _check_batch(params: GlmParams, X: NDArray[np.float64], M: NDArray[np.bool_]) -> None:
    if X.ndim != 2 or X.shape != M.shape or X.shape[1] != params.dimension:
        raise DimensionMismatchError(
            f"features {X.shape} and masks {M.shape} for d={params.dimension}"
        )


def oracle_mean_batch(
    params: GlmParams, X: NDArray[np.float64], M: NDArray[np.bool_]
) -> NDArray[np.float64]:
    """Row-wise oracle_mean, one factorization per distinct mask."""
    _check_batch(params, X, M)
    out = np.empty(X.shape[0])
    if X.shape[0] == 0:
        return out
    uniq, inverse = np.unique(M, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for u, bits in enumerate(uniq):
        m = MaskPattern.from_array(bits)
        rows = inverse == u
        mis, obs = m.missing_index(), m.observed_index()
        mu, A, _ = _regression_operator(params, m)
        x_obs = X[np.ix_(rows, obs)]
        mis_mean = mu[mis][None, :] + (x_obs - mu[obs][None, :]) @ A.T
        out[rows] = x_obs @ params.beta[obs] + mis_mean @ params.beta[mis]
    return out


def oracle_interval_batch(
    params: GlmParams, X: NDArray[np.float64], M: NDArray[np.bool_], alpha: float
) -> IntervalBatch:
    check_alpha(alpha)
    centers = oracle_mean_batch(params, X, M)
    half = np.empty(X.shape[0])
    if X.shape[0]:
        uniq, inverse = np.unique(M, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for u, bits in enumerate(uniq):
            half[inverse == u] = oracle_length(params, MaskPattern.from_array(bits), alpha) / 2.0
    return IntervalBatch.build(
        lower=centers - half, upper=centers + half, masks=M, cal_subset_sizes=0
    )


def _draw_gaussian(
    mean: NDArray[np.float64], cov: NDArray[np.float64], n: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        logger.warning("Cholesky of the covariance failed; retrying with diagonal jitter")
        try:
            L = np.linalg.cholesky(cov + JITTER * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError("covariance cannot be factorized") from exc
    Z = rng.standard_normal((n, cov.shape[0]))
    return np.asarray(mean[None, :] + Z @ L.T, dtype=np.float64)


@typechecked
def generate_glm_dataset_with_masks(
    params: GlmParams, masks: NDArray[np.bool_], seed: SeedLike
) -> MaskedDataset:
    """
    Draw complete (X, Y) for rows whose masks are fixed in advance, then
    apply the masks. The complete covariates stay in `hidden_features`.
    """
    n, d = masks.shape
    if d != params.dimension:
        raise DimensionMismatchError(f"masks have {d} columns for d={params.dimension}")
    rng = as_generator(seed)
    x_rng, eps_rng = rng.spawn(2)

    X = np.empty((n, d))
    if not params.overrides:
        X[:] = _draw_gaussian(params.mean, params.cov, n, x_rng)
    else:
        uniq, inverse = np.unique(masks, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for u, bits in enumerate(uniq):
            rows = inverse == u
            mean, cov = params.moments_for(MaskPattern.from_array(bits))
            X[rows] = _draw_gaussian(mean, cov, int(rows.sum()), x_rng)
    y = X @ params.beta + params.noise_std * eps_rng.standard_normal(n)
    return MaskedDataset.build(X, masks, y, hidden_features=X)


@typechecked
def generate_glm_dataset(
    params: GlmParams, n: int, mcar: McarSpec, seed: SeedLike
) -> MaskedDataset:
    """Masks are drawn first and independently of (X, Y)."""
    rng = as_generator(seed)
    mask_rng, data_rng = rng.spawn(2)
    masks = gen_mcar_masks(n, params.dimension, mcar, mask_rng)
    logger.debug(f"generated {n} rows, missing fraction {masks.mean():.3f}")
    return generate_glm_dataset_with_masks(params, masks, data_rng)
