"""Tests for the pinball loss and the quantile learners"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.conformal_missing.data_model import DimensionMismatchError, MaskPattern
from src.conformal_missing.imputation import ImputerKind, fit_imputer
from src.conformal_missing.quantile_regression import (
    ModelKind,
    QrHyper,
    featurize_batch,
    featurize_with_mask,
    fit_mean_model,
    fit_quantile_model,
    pinball_loss,
    pinball_risk,
    predict_quantile,
    predict_quantile_batch,
)
from tests.helpers import linear_dataset

ZERO_TOL = 1e-8


def _sample(n: int = 300, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = 1.0 + X @ np.array([2.0, -1.0]) + rng.normal(size=n)
    return X, y


class TestPinballLoss:
    """Tests for pinball_loss and pinball_risk"""

    def test_values(self):
        """Test both branches of the loss"""
        assert pinball_loss(3.0, 1.0, 0.9) == pytest.approx(1.8)
        assert pinball_loss(1.0, 3.0, 0.9) == pytest.approx(0.2)
        assert pinball_loss(2.0, 2.0, 0.3) == 0.0

    def test_invalid_level(self):
        """Test the level must lie strictly inside (0, 1)"""
        with pytest.raises(ValueError):
            pinball_loss(1.0, 0.0, 1.0)

    def test_risk_is_mean_of_losses(self):
        """Test pinball_risk averages pinball_loss"""
        y = np.array([1.0, -2.0, 0.5])
        yhat = np.array([0.0, 0.0, 1.0])
        expected = np.mean([pinball_loss(float(a), float(b), 0.25) for a, b in zip(y, yhat)])
        assert pinball_risk(y, yhat, 0.25) == pytest.approx(expected)

    def test_convex_in_prediction(self):
        """Test the risk is convex along segments of predictions"""
        rng = np.random.default_rng(1)
        y = rng.normal(size=50)
        for _ in range(20):
            a, b = rng.normal(size=50), rng.normal(size=50)
            lam = float(rng.uniform())
            mid = pinball_risk(y, lam * a + (1 - lam) * b, 0.7)
            ends = lam * pinball_risk(y, a, 0.7) + (1 - lam) * pinball_risk(y, b, 0.7)
            assert mid <= ends + 1e-12


class TestLinearQuantileModel:
    """Tests for the exact linear pinball solver"""

    @pytest.mark.parametrize("tau", [0.05, 0.5, 0.95])
    def test_subgradient_optimality(self, tau):
        """Test residual signs satisfy the intercept optimality condition"""
        X, y = _sample()
        model = fit_quantile_model(X, y, tau)
        r = y - predict_quantile_batch(model, X)
        n = y.size
        assert np.sum(r < -ZERO_TOL) <= tau * n + 1e-9
        assert np.sum(r > ZERO_TOL) <= (1 - tau) * n + 1e-9

    @pytest.mark.parametrize("tau", [0.05, 0.5, 0.95])
    def test_subgradient_optimality_every_coordinate(self, tau):
        """Test zero lies in the risk's subdifferential along every coordinate"""
        X, y = _sample()
        model = fit_quantile_model(X, y, tau)
        r = y - predict_quantile_batch(model, X)
        design = np.column_stack([np.ones(y.size), X])
        on_fit = np.abs(r) <= 1e-6
        assert on_fit.sum() >= 1
        pull = design[~on_fit].T @ np.where(r[~on_fit] > 0, tau, tau - 1.0)
        slack = np.abs(design[on_fit]).sum(axis=0) * max(tau, 1.0 - tau)
        assert (np.abs(pull) <= slack + 1e-6).all()

    def test_gaussian_upper_quantile(self):
        """Test the 0.95 fit on y = x + N(0, 1) shifts the line by z_0.95"""
        rng = np.random.default_rng(4)
        x = rng.normal(size=20000)
        y = x + rng.normal(size=20000)
        model = fit_quantile_model(x[:, None], y, 0.95)
        assert model.coef is not None
        assert model.intercept == pytest.approx(1.645, abs=0.05)
        assert model.coef[0] == pytest.approx(1.0, abs=0.05)

    def test_beats_random_models(self):
        """Test no random linear model reaches a lower empirical risk"""
        X, y = _sample(seed=5)
        model = fit_quantile_model(X, y, 0.8)
        best = pinball_risk(y, predict_quantile_batch(model, X), 0.8)
        rng = np.random.default_rng(6)
        for _ in range(100):
            coef, intercept = rng.normal(scale=2.0, size=2), float(rng.normal(scale=2.0))
            assert pinball_risk(y, X @ coef + intercept, 0.8) >= best - 1e-9

    def test_no_better_nearby(self):
        """Test perturbing the solution never lowers the empirical risk"""
        X, y = _sample(seed=2)
        model = fit_quantile_model(X, y, 0.9)
        assert model.coef is not None
        best = pinball_risk(y, X @ model.coef + model.intercept, 0.9)
        rng = np.random.default_rng(3)
        for _ in range(25):
            dc, di = rng.normal(scale=0.05, size=2), float(rng.normal(scale=0.05))
            other = pinball_risk(y, X @ (model.coef + dc) + model.intercept + di, 0.9)
            assert other >= best - 1e-9

    def test_quantiles_are_ordered(self):
        """Test the 0.05 fit stays below the 0.95 fit on the training points"""
        X, y = _sample(n=1000)
        lo = predict_quantile_batch(fit_quantile_model(X, y, 0.05), X)
        hi = predict_quantile_batch(fit_quantile_model(X, y, 0.95), X)
        assert np.mean(lo <= hi) >= 0.99
        assert np.mean(hi - lo) == pytest.approx(2 * 1.645, rel=0.15)

    def test_single_prediction(self):
        """Test predict_quantile agrees with the batch prediction"""
        X, y = _sample()
        model = fit_quantile_model(X, y, 0.5)
        assert predict_quantile(model, X[3]) == pytest.approx(
            float(predict_quantile_batch(model, X)[3])
        )

    def test_feature_count_checked(self):
        """Test predicting with the wrong width raises"""
        X, y = _sample()
        model = fit_quantile_model(X, y, 0.5)
        with pytest.raises(DimensionMismatchError):
            predict_quantile(model, np.ones(3))

    def test_too_few_rows(self):
        """Test a single row cannot be fitted"""
        with pytest.raises(ValueError):
            fit_quantile_model(np.ones((1, 2)), np.ones(1), 0.5)

    def test_response_length_checked(self):
        """Test responses must match the rows"""
        with pytest.raises(DimensionMismatchError):
            fit_quantile_model(np.ones((4, 2)), np.ones(3), 0.5)


class TestMeanModel:
    """Tests for the least-squares mean model"""

    def test_recovers_coefficients(self):
        """Test the mean model recovers a noiseless linear function"""
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 3))
        y = 0.5 + X @ np.array([1.0, -2.0, 3.0])
        model = fit_mean_model(X, y)
        assert np.allclose(model.coef, [1.0, -2.0, 3.0])
        assert model.intercept == pytest.approx(0.5)
        assert model.n_features == 3


class TestFeaturize:
    """Tests for mask-concatenated features"""

    def test_concatenates_mask(self):
        """Test features are the imputed row followed by the mask bits"""
        data = linear_dataset(n=100, d=3, rate=0.3, seed=0)
        imp = fit_imputer(ImputerKind.MEAN, data)
        z = featurize_with_mask(imp, np.array([1.0, np.nan, 2.0]), MaskPattern.from_key("010"))
        assert z.shape == (6,)
        assert list(z[3:]) == [0.0, 1.0, 0.0]
        assert z[1] == imp.fill[1]

    def test_without_mask(self):
        """Test concat_mask=False keeps only the imputed features"""
        data = linear_dataset(n=100, d=3, rate=0.3, seed=0)
        imp = fit_imputer(ImputerKind.MEAN, data)
        Z = featurize_batch(imp, data.features, data.masks, concat_mask=False)
        assert Z.shape == (100, 3)


class TestMlp:
    """Tests for the optional neural learner"""

    def test_bad_hyper(self):
        """Test invalid training recipes are refused"""
        with pytest.raises(ValidationError):
            QrHyper(dropout=1.0)
        with pytest.raises(ValidationError):
            QrHyper(max_epochs=0)

    def test_fit_and_predict(self):
        """Test a short training run yields finite, deterministic predictions"""
        X, y = _sample(n=120)
        hyper = QrHyper(hidden_dim=8, max_epochs=5, batch_size=32, patience=2, seed=1)
        one = fit_quantile_model(X, y, 0.9, ModelKind.MLP, hyper)
        two = fit_quantile_model(X, y, 0.9, ModelKind.MLP, hyper)
        p1, p2 = one.predict_batch(X), two.predict_batch(X)
        assert p1.shape == (120,)
        assert np.isfinite(p1).all()
        assert np.allclose(p1, p2)
