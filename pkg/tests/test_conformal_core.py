"""Tests for corrected quantiles, scores and impute-then-predict conformalization"""

import math
from fractions import Fraction

import numpy as np
import pytest
from pydantic import ValidationError

from src.conformal_missing.conformal_core import (
    CalibrationRecord,
    MeanBand,
    OracleMeanBand,
    ScoreFunction,
    ScoreKind,
    abs_residual_score,
    calibrate_band,
    collapse_inverted,
    corrected_index,
    corrected_lower_quantile,
    corrected_lower_quantile_rows,
    corrected_upper_quantile,
    corrected_upper_quantile_rows,
    cqr_score,
    exact_coverage_by_rank,
    fit_mean_band,
    fit_quantile_band,
    groupwise_calibrate_by_pattern_size,
    itp_conformalize_fit,
    itp_conformalize_predict,
    itp_conformalize_predict_batch,
    pipeline_from_band,
    qr_intervals,
    widen,
)
from src.conformal_missing.data_model import MaskedDataset, MaskPattern
from src.conformal_missing.gaussian_oracle import GlmParams
from src.conformal_missing.imputation import ImputerKind
from tests.helpers import linear_dataset, split_dataset


class TestCorrectedQuantiles:
    """Tests for the finite-sample corrected quantiles"""

    def test_index_tolerance(self):
        """Test products landing a hair above an integer are not rounded up"""
        assert corrected_index(9, 0.3) == 7
        assert corrected_index(9, 0.1) == 9
        assert corrected_index(19, 0.1) == 18

    def test_upper_quantile(self):
        """Test the k-th smallest score is returned"""
        scores = [5.0, 1.0, 4.0, 2.0, 3.0, 9.0, 7.0, 8.0, 6.0]
        assert corrected_upper_quantile(scores, 0.3) == 7.0

    def test_too_few_scores(self):
        """Test k > n gives +inf and an empty sample gives +inf"""
        assert corrected_upper_quantile([1.0, 2.0], 0.1) == math.inf
        assert corrected_upper_quantile([], 0.1) == math.inf

    def test_lower_is_negated_upper(self):
        """Test the lower quantile mirrors the upper one"""
        scores = np.array([3.0, -1.0, 2.0, 8.0, 0.5])
        assert corrected_lower_quantile(scores, 0.4) == -corrected_upper_quantile(-scores, 0.4)
        assert corrected_lower_quantile([1.0], 0.1) == -math.inf

    def test_rows_match_scalar(self):
        """Test the row-wise versions agree with the scalar ones"""
        rng = np.random.default_rng(0)
        S = rng.normal(size=(7, 40))
        up = corrected_upper_quantile_rows(S, 0.1)
        lo = corrected_lower_quantile_rows(S, 0.1)
        for i in range(7):
            assert up[i] == corrected_upper_quantile(S[i], 0.1)
            assert lo[i] == corrected_lower_quantile(S[i], 0.1)
        assert np.isinf(corrected_upper_quantile_rows(S[:, :3], 0.1)).all()

    def test_invalid_alpha(self):
        """Test alpha outside (0, 1) raises"""
        with pytest.raises(ValueError):
            corrected_upper_quantile([1.0], 0.0)


class TestExactCoverageByRank:
    """Rank combinatorics of split conformal"""

    @pytest.mark.parametrize("n", range(1, 7))
    @pytest.mark.parametrize("alpha", ["0.1", "0.25", "0.5"])
    def test_exact_value_and_bounds(self, n, alpha):
        """Test coverage equals ceil((1 - alpha)(n + 1)) / (n + 1) within the validity bounds"""
        a = Fraction(alpha)
        expected = Fraction(math.ceil((1 - a) * (n + 1)), n + 1)
        got = exact_coverage_by_rank(n, float(a))
        assert got == expected
        assert 1 - a <= got <= 1 - a + Fraction(1, n + 1)


class TestScores:
    """Tests for the conformity scores"""

    def test_cqr_score(self):
        """Test the signed distance to the band"""
        assert cqr_score(0.0, 1.0, 0.5) == -0.5
        assert cqr_score(0.0, 1.0, 3.0) == 2.0
        assert cqr_score(0.0, 1.0, -1.0) == 1.0

    def test_abs_residual(self):
        """Test the absolute residual and its equality with a degenerate band"""
        assert abs_residual_score(1.0, -2.0) == 3.0
        assert cqr_score(1.0, 1.0, -2.0) == abs_residual_score(1.0, -2.0)

    def test_score_function_matches_band(self):
        """Test the CQR score needs a quantile band"""
        band = OracleMeanBand(params=GlmParams.equicorrelated(3))
        assert ScoreFunction(kind=ScoreKind.ABS_RESIDUAL, band=band)
        with pytest.raises(ValidationError):
            ScoreFunction(kind=ScoreKind.CQR, band=band)

    def test_score_function_drives_calibration(self):
        """Test calibration stores the score function's scores"""
        params = GlmParams.equicorrelated(3)
        band = OracleMeanBand(params=params)
        cal = linear_dataset(n=50, rate=0.3, seed=2)
        center, _ = band.predict_band(cal.features, cal.masks)
        scores = ScoreFunction(kind=ScoreKind.ABS_RESIDUAL, band=band).scores(
            cal.features, cal.masks, cal.responses
        )
        assert np.allclose(scores, np.abs(cal.responses - center))
        assert np.array_equal(calibrate_band(band, cal, 0.1).scores, scores)


class TestWiden:
    """Tests for widen and collapse_inverted"""

    def test_finite(self):
        """Test lower and upper move out by the correction"""
        lo, hi = widen(np.array([0.0]), np.array([1.0]), 0.5)
        assert lo[0] == -0.5 and hi[0] == 1.5

    def test_infinite(self):
        """Test an infinite correction gives the whole line"""
        lo, hi = widen(np.array([0.0, 2.0]), np.array([1.0, 3.0]), np.array([math.inf, 1.0]))
        assert lo[0] == -math.inf and hi[0] == math.inf
        assert lo[1] == 1.0 and hi[1] == 4.0

    def test_negative_collapses(self):
        """Test a negative correction that inverts the band collapses to the midpoint"""
        lo, hi = widen(np.array([0.0]), np.array([1.0]), -2.0)
        assert lo[0] == hi[0] == 0.5
        lo, hi = collapse_inverted(np.array([1.0]), np.array([2.0]))
        assert (lo[0], hi[0]) == (1.0, 2.0)


class TestCalibration:
    """Tests for CalibrationRecord and calibrate_band"""

    def test_record(self):
        """Test the record exposes the correction"""
        rec = CalibrationRecord(scores=np.arange(1.0, 10.0), alpha=0.3)
        assert rec.size == 9
        assert rec.correction == 7.0

    def test_nonfinite_scores(self):
        """Test NaN scores are refused"""
        with pytest.raises(ValidationError):
            CalibrationRecord(scores=np.array([np.nan]), alpha=0.1)

    def test_empty_calibration(self):
        """Test zero calibration rows give an infinite correction"""
        data = split_dataset()
        band = fit_quantile_band(data.train_part(), ImputerKind.MEAN, 0.1)
        empty = data.cal_part().subset(np.arange(0))
        assert calibrate_band(band, empty, 0.1).correction == math.inf

    def test_quantile_band_levels(self):
        """Test the band is fitted at alpha/2 and 1 - alpha/2 and never crosses"""
        data = split_dataset()
        band = fit_quantile_band(data.train_part(), ImputerKind.ITERATIVE_RIDGE, 0.2)
        assert band.low.level == pytest.approx(0.1)
        assert band.high.level == pytest.approx(0.9)
        lo, hi = band.predict_band(data.features, data.masks)
        assert (lo <= hi).all()

    def test_uncalibrated_intervals(self):
        """Test qr_intervals reports the raw band with no calibration rows"""
        data = split_dataset()
        band = fit_quantile_band(data.train_part(), ImputerKind.MEAN, 0.1)
        batch = qr_intervals(band, data.features, data.masks)
        lo, _ = band.predict_band(data.features, data.masks)
        assert np.array_equal(batch.lower, lo)
        assert (batch.cal_subset_sizes == 0).all()


class TestItpPipeline:
    """Tests for impute-then-predict conformalization"""

    def test_fit_and_predict_cqr(self):
        """Test the interval is the band widened by the correction"""
        data = split_dataset(n=600)
        split = data.split
        assert split is not None
        pipeline = itp_conformalize_fit(
            data, split, ImputerKind.ITERATIVE_RIDGE, ScoreKind.CQR, 0.1
        )
        assert pipeline.record.size == len(split.cal)
        row = np.array([1.0, np.nan, 0.5])
        m = MaskPattern.from_key("010")
        iv = itp_conformalize_predict(pipeline, row, m)
        lo, hi = pipeline.band.predict_band(row[None, :], m.as_array()[None, :])
        q = pipeline.record.correction
        assert iv.lower == pytest.approx(lo[0] - q)
        assert iv.upper == pytest.approx(hi[0] + q)
        assert iv.cal_subset_size == len(split.cal)

    def test_abs_residual_is_symmetric(self):
        """Test the mean score gives intervals symmetric around the mean"""
        data = split_dataset(n=600)
        assert data.split is not None
        pipeline = itp_conformalize_fit(
            data, data.split, ImputerKind.MEAN, ScoreKind.ABS_RESIDUAL, 0.1
        )
        assert isinstance(pipeline.band, MeanBand)
        batch = itp_conformalize_predict_batch(pipeline, data.features, data.masks)
        assert np.allclose(batch.lengths, 2 * pipeline.record.correction)

    def test_marginal_coverage(self):
        """Test marginal coverage of impute-then-CQR on fresh data"""
        data = split_dataset(n=1500, seed=5)
        assert data.split is not None
        pipeline = itp_conformalize_fit(
            data, data.split, ImputerKind.ITERATIVE_RIDGE, ScoreKind.CQR, 0.1
        )
        test = linear_dataset(n=4000, seed=77)
        batch = pipeline.predict_batch(test.features, test.masks)
        covered = (test.responses >= batch.lower) & (test.responses <= batch.upper)
        assert covered.mean() == pytest.approx(0.9, abs=0.04)

    def test_complete_data_split_cqr(self):
        """Test calibration on complete rows gives the textbook split CQR"""
        data = split_dataset(n=400, rate=0.0)
        band = fit_quantile_band(data.train_part(), ImputerKind.MEAN, 0.1)
        cal = data.cal_part()
        lo, hi = band.predict_band(cal.features, cal.masks)
        scores = np.maximum(lo - cal.responses, cal.responses - hi)
        k = math.ceil(0.9 * (cal.size + 1))
        expected = np.sort(scores)[k - 1]
        assert pipeline_from_band(band, cal, 0.1).record.correction == pytest.approx(expected)


class TestPatternSizeCalibration:
    """Tests for calibration by pattern size"""

    def test_per_size_records(self):
        """Test each size gets the corrected quantile of its own scores"""
        params = GlmParams.equicorrelated(3)
        data = split_dataset(n=900, rate=0.3, params=params)
        cal = data.cal_part()
        pipeline = pipeline_from_band(OracleMeanBand(params=params), cal, 0.1)
        grouped = groupwise_calibrate_by_pattern_size(pipeline, cal, 0.1)
        sizes = cal.masks.sum(axis=1)
        for s, rec in grouped.by_size.items():
            assert rec.size == int((sizes == s).sum())
        assert grouped.marginal.size == cal.size

    def test_unseen_size_uses_marginal(self):
        """Test a size absent from calibration falls back to the marginal correction"""
        params = GlmParams.equicorrelated(2)
        X = np.random.default_rng(0).normal(size=(30, 2))
        cal = MaskedDataset.build(X, np.zeros((30, 2)), X.sum(axis=1))
        pipeline = pipeline_from_band(OracleMeanBand(params=params), cal, 0.1)
        grouped = groupwise_calibrate_by_pattern_size(pipeline, cal, 0.1)
        assert set(grouped.by_size) == {0}
        iv = grouped.predict(np.array([np.nan, 1.0]), MaskPattern.from_key("10"))
        center = (iv.lower + iv.upper) / 2
        assert iv.upper - center == pytest.approx(grouped.marginal.correction)

    def test_missing_cells_raise_the_correction(self):
        """Test the size-2 correction exceeds size 0 when missing cells add spread"""
        params = GlmParams.equicorrelated(3)
        band = OracleMeanBand(params=params)
        larger = 0
        for run in range(100):
            cal = linear_dataset(n=300, rate=0.3, seed=run)
            pipeline = pipeline_from_band(band, cal, 0.1)
            grouped = groupwise_calibrate_by_pattern_size(pipeline, cal, 0.1)
            larger += grouped.record_for(2).correction > grouped.record_for(0).correction
        assert larger >= 95


class TestMeanBand:
    """Tests for the least-squares mean band"""

    def test_degenerate_band(self):
        """Test the mean band returns equal low and high"""
        data = split_dataset()
        band = fit_mean_band(data.train_part(), ImputerKind.MEAN)
        lo, hi = band.predict_band(data.features, data.masks)
        assert np.array_equal(lo, hi)
