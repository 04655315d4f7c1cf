"""
Pinball loss, mask-concatenated features and conditional-quantile learners.

The linear learner solves the pinball-loss linear program exactly (HiGHS
through scikit-learn). The MLP learner is optional: three fully connected
layers of width 64, ReLU, dropout 0.1, Adam at 5e-4, epoch count picked on a
10% hold-out. Its trained weights are copied out of torch so prediction is a
plain numpy forward pass.
"""

import logging
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import model_validator
from sklearn.linear_model import LinearRegression, QuantileRegressor
from typeguard import typechecked
from typing_extensions import Self

from .data_model import DimensionMismatchError, MaskPattern
from .imputation import Imputer
from .validation_helpers import ArrayField, StrictBaseModel, check_level, freeze_array

logger = logging.getLogger(__name__)


class ModelKind(Enum):
    LINEAR = "linear"
    MLP = "mlp"


class QrHyper(StrictBaseModel):
    """Training recipe for the MLP learner; ignored by the linear one."""

    hidden_dim: int = 64
    dropout: float = 0.1
    learning_rate: float = 5e-4
    max_epochs: int = 2000
    batch_size: int = 64
    holdout_fraction: float = 0.1
    patience: int = 200
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.hidden_dim < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("hidden_dim, batch_size and patience must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError(
                f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}"
            )
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        return self


class MlpWeights(StrictBaseModel):
    layers: tuple[tuple[ArrayField, ArrayField], ...]
    x_mean: ArrayField
    x_scale: ArrayField
    y_mean: float
    y_scale: float

    @model_validator(mode="after")
    def _freeze(self) -> Self:
        object.__setattr__(
            self,
            "layers",
            tuple((freeze_array(w), freeze_array(b)) for w, b in self.layers),
        )
        object.__setattr__(self, "x_mean", freeze_array(self.x_mean))
        object.__setattr__(self, "x_scale", freeze_array(self.x_scale))
        return self

    def forward(self, Z: NDArray[np.float64]) -> NDArray[np.float64]:
        h = (Z - self.x_mean) / self.x_scale
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return np.asarray(h[:, 0] * self.y_scale + self.y_mean, dtype=np.float64)


class QuantileModel(StrictBaseModel):
    level: float
    kind: ModelKind
    n_features: int
    coef: Optional[ArrayField] = None
    intercept: float = 0.0
    mlp: Optional[MlpWeights] = None

    @model_validator(mode="after")
    def _check(self) -> Self:
        check_level(self.level)
        if self.kind is ModelKind.LINEAR:
            if self.coef is None or self.coef.shape != (self.n_features,):
                raise DimensionMismatchError(
                    f"linear model needs {self.n_features} coefficients"
                )
            object.__setattr__(self, "coef", freeze_array(self.coef))
        elif self.mlp is None:
            raise ValueError("mlp model needs weights")
        return self

    def predict_batch(self, Z: NDArray[np.float64]) -> NDArray[np.float64]:
        if Z.ndim != 2 or Z.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"model expects {self.n_features} features, got shape {Z.shape}"
            )
        if self.kind is ModelKind.LINEAR:
            assert self.coef is not None
            return np.asarray(Z @ self.coef + self.intercept, dtype=np.float64)
        assert self.mlp is not None
        return self.mlp.forward(Z)


class MeanModel(StrictBaseModel):
    """Least-squares conditional mean over the same features."""

    coef: ArrayField
    intercept: float

    @model_validator(mode="after")
    def _freeze(self) -> Self:
        object.__setattr__(self, "coef", freeze_array(self.coef))
        return self

    @property
    def n_features(self) -> int:
        return int(self.coef.shape[0])

    def predict_batch(self, Z: NDArray[np.float64]) -> NDArray[np.float64]:
        if Z.ndim != 2 or Z.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"model expects {self.n_features} features, got shape {Z.shape}"
            )
        return np.asarray(Z @ self.coef + self.intercept, dtype=np.float64)


@typechecked
def pinball_loss(y: float, yhat: float, tau: float) -> float:
    check_level(tau)
    u = y - yhat
    return tau * u if u >= 0 else (1.0 - tau) * (-u)


def pinball_risk(
    y: NDArray[np.float64], yhat: NDArray[np.float64], tau: float
) -> float:
    """Mean pinball loss over a sample."""
    check_level(tau)
    u = y - yhat
    return float(np.mean(np.where(u >= 0, tau * u, (tau - 1.0) * u)))


@typechecked
def featurize_with_mask(
    imp: Imputer, row: NDArray[np.float64], m: MaskPattern
) -> NDArray[np.float64]:
    return featurize_batch(imp, row[None, :], m.as_array()[None, :])[0]


def featurize_batch(
    imp: Imputer,
    X: NDArray[np.float64],
    M: NDArray[np.bool_],
    concat_mask: bool = True,
) -> NDArray[np.float64]:
    """Imputed features, followed by the mask bits as 0.0/1.0 unless `concat_mask` is off."""
    filled = imp.impute_batch(X, M)
    if not concat_mask:
        return filled
    return np.hstack([filled, M.astype(np.float64)])


def _check_rows(rows: NDArray[np.float64], responses: NDArray[np.float64]) -> None:
    if rows.ndim != 2 or responses.shape != (rows.shape[0],):
        raise DimensionMismatchError(
            f"features {rows.shape} do not match responses {responses.shape}"
        )
    if rows.shape[0] < 2:
        raise ValueError(f"need at least 2 rows to fit, got {rows.shape[0]}")


@typechecked
def fit_quantile_model(
    rows: NDArray[np.float64],
    responses: NDArray[np.float64],
    tau: float,
    kind: ModelKind = ModelKind.LINEAR,
    hyper: Optional[QrHyper] = None,
) -> QuantileModel:
    check_level(tau)
    _check_rows(rows, responses)
    if kind is ModelKind.MLP:
        return _fit_mlp(rows, responses, tau, hyper or QrHyper())

    qr = QuantileRegressor(quantile=tau, alpha=0.0, solver="highs", fit_intercept=True)
    qr.fit(rows, responses)
    return QuantileModel(
        level=tau,
        kind=kind,
        n_features=int(rows.shape[1]),
        coef=np.asarray(qr.coef_, dtype=np.float64),
        intercept=float(qr.intercept_),
    )


@typechecked
def fit_mean_model(rows: NDArray[np.float64], responses: NDArray[np.float64]) -> MeanModel:
    _check_rows(rows, responses)
    lr = LinearRegression().fit(rows, responses)
    return MeanModel(coef=np.asarray(lr.coef_, dtype=np.float64), intercept=float(lr.intercept_))


@typechecked
def predict_quantile(model: QuantileModel, features: NDArray[np.float64]) -> float:
    if features.shape != (model.n_features,):
        raise DimensionMismatchError(
            f"model expects {model.n_features} features, got shape {features.shape}"
        )
    return float(model.predict_batch(features[None, :])[0])


@typechecked
def predict_quantile_batch(
    model: QuantileModel, features: NDArray[np.float64]
) -> NDArray[np.float64]:
    return model.predict_batch(features)


def _fit_mlp(
    rows: NDArray[np.float64],
    responses: NDArray[np.float64],
    tau: float,
    hyper: QrHyper,
) -> QuantileModel:
    import torch
    from torch import nn

    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    n, p = rows.shape

    x_mean = rows.mean(axis=0)
    x_scale = rows.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    y_mean = float(responses.mean())
    y_scale = float(responses.std()) or 1.0

    perm = rng.permutation(n)
    n_hold = max(1, int(round(hyper.holdout_fraction * n)))
    hold, fit = perm[:n_hold], perm[n_hold:]
    if fit.size == 0:
        raise ValueError(f"too few rows ({n}) to hold out a validation part")

    Xs = torch.as_tensor((rows - x_mean) / x_scale, dtype=torch.float32)
    ys = torch.as_tensor((responses - y_mean) / y_scale, dtype=torch.float32)

    net = nn.Sequential(
        nn.Linear(p, hyper.hidden_dim),
        nn.ReLU(),
        nn.Dropout(hyper.dropout),
        nn.Linear(hyper.hidden_dim, hyper.hidden_dim),
        nn.ReLU(),
        nn.Dropout(hyper.dropout),
        nn.Linear(hyper.hidden_dim, 1),
    )
    optimizer = torch.optim.Adam(net.parameters(), lr=hyper.learning_rate)

    def loss_fn(pred: "torch.Tensor", target: "torch.Tensor") -> "torch.Tensor":
        u = target - pred
        return torch.mean(torch.maximum(tau * u, (tau - 1.0) * u))

    best_loss = float("inf")
    best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    best_epoch = 0
    for epoch in range(hyper.max_epochs):
        net.train()
        order = fit[rng.permutation(fit.size)]
        for start in range(0, order.size, hyper.batch_size):
            batch = torch.as_tensor(order[start : start + hyper.batch_size])
            optimizer.zero_grad()
            loss = loss_fn(net(Xs[batch]).squeeze(1), ys[batch])
            loss.backward()
            optimizer.step()

        net.eval()
        with torch.no_grad():
            hold_t = torch.as_tensor(hold)
            hold_loss = float(loss_fn(net(Xs[hold_t]).squeeze(1), ys[hold_t]))
        if hold_loss < best_loss:
            best_loss, best_epoch = hold_loss, epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        elif epoch - best_epoch >= hyper.patience:
            break
    logger.debug(f"mlp tau={tau}: best hold-out loss {best_loss:.4g} at epoch {best_epoch}")

    linears = [best_state[f"{i}.weight"] for i in (0, 3, 6)]
    biases = [best_state[f"{i}.bias"] for i in (0, 3, 6)]
    return QuantileModel(
        level=tau,
        kind=ModelKind.MLP,
        n_features=int(p),
        mlp=MlpWeights(
            layers=tuple(
                (w.numpy().astype(np.float64), b.numpy().astype(np.float64))
                for w, b in zip(linears, biases)
            ),
            x_mean=x_mean,
            x_scale=x_scale,
            y_mean=y_mean,
            y_scale=y_scale,
        ),
    )
