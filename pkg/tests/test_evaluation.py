"""Tests for coverage reports, experiment configs and the repetition runner"""

import logging
import math
import pickle
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.conformal_missing.cp_mda import PatternChoiceMode
from src.conformal_missing.data_model import IntervalBatch, MaskPattern
from src.conformal_missing.evaluation import (
    CoverageReport,
    DatasetConfig,
    EvalConfig,
    EvalMode,
    ExperimentConfig,
    ExperimentError,
    GeneratorConfig,
    Method,
    SizesConfig,
    aggregate_results,
    coverage_report,
    draw_real_repetition,
    draw_synthetic_repetition,
    eval_masks,
    reports_frame,
    run_experiment,
    run_repetition,
)
from src.conformal_missing.gaussian_oracle import oracle_length
from src.conformal_missing.missingness import enumerate_masks
from tests.helpers import linear_dataset


def _synthetic_config(**overrides) -> ExperimentConfig:
    fields = dict(
        generator=GeneratorConfig(dimension=3, missing_rate=0.2),
        sizes=SizesConfig(train=200, cal=100, test=200),
        evaluation=EvalConfig(per_pattern=20),
        seed=11,
    )
    fields.update(overrides)
    return ExperimentConfig(**fields)


def _real_config(**overrides) -> ExperimentConfig:
    fields = dict(
        dataset=DatasetConfig(path=Path("unused.csv"), target="y", missing_rate=0.2),
        sizes=SizesConfig(train=150, cal=100, test=100),
        evaluation=EvalConfig(per_pattern=5),
        seed=3,
    )
    fields.update(overrides)
    return ExperimentConfig(**fields)


def _report() -> CoverageReport:
    batch = IntervalBatch.build(
        lower=[0.0, 0.0, -math.inf, 1.0],
        upper=[1.0, 1.0, math.inf, 2.0],
        masks=np.zeros((4, 2), dtype=bool),
        cal_subset_sizes=0,
    )
    y = np.array([0.5, 2.0, 100.0, 1.0])
    masks = np.array([[False, False], [False, False], [True, True], [True, False]])
    return coverage_report(batch, y, masks, clamp_range=10.0)


class TestCoverageReport:
    """Tests for coverage_report"""

    def test_marginal(self):
        """Test closed intervals, finite mean length and the infinite fraction"""
        marginal = _report().marginal
        assert marginal.n_test == 4
        assert marginal.coverage == pytest.approx(0.75)
        assert marginal.mean_length == pytest.approx(1.0)
        assert marginal.infinite_fraction == pytest.approx(0.25)
        assert marginal.clamped_mean_length == pytest.approx(3.25)

    def test_mask_groups(self):
        """Test one record per distinct mask"""
        report = _report()
        assert sorted(r.group for r in report.mask_records) == ["mask:00", "mask:10", "mask:11"]
        assert report.record("mask:00").coverage == pytest.approx(0.5)
        assert report.record("mask:00").n_test == 2
        all_missing = report.record("mask:11")
        assert all_missing.mean_length == math.inf
        assert all_missing.infinite_fraction == 1.0
        assert report.lowest_mask_coverage == pytest.approx(0.5)
        assert report.highest_mask_coverage == pytest.approx(1.0)

    def test_size_groups(self):
        """Test one record per pattern size"""
        report = _report()
        assert [(r.group, r.n_test) for r in report.size_records] == [
            ("size:0", 2),
            ("size:1", 1),
            ("size:2", 1),
        ]

    def test_unknown_group(self):
        """Test asking for an absent group raises KeyError"""
        with pytest.raises(KeyError):
            _report().record("mask:01")

    def test_shape_mismatch(self):
        """Test responses of the wrong length are rejected"""
        batch = IntervalBatch.build([0.0], [1.0], np.zeros((1, 2), dtype=bool), 0)
        with pytest.raises(ValueError):
            coverage_report(batch, np.array([0.5, 0.5]), np.zeros((1, 2), dtype=bool))


class TestConfig:
    """Tests for the experiment config models"""

    def test_defaults(self):
        """Test a generator-only config takes the default methods"""
        cfg = ExperimentConfig(generator=GeneratorConfig())
        assert cfg.methods == (
            Method.QR,
            Method.CQR,
            Method.CQR_MDA_EXACT,
            Method.CQR_MDA_NESTED,
        )
        assert cfg.alpha == 0.1

    def test_exactly_one_source(self):
        """Test a config needs exactly one of a generator and a dataset"""
        with pytest.raises(ValidationError):
            ExperimentConfig()
        with pytest.raises(ValidationError):
            ExperimentConfig(
                generator=GeneratorConfig(),
                dataset=DatasetConfig(path=Path("d.csv"), target="y"),
            )

    def test_duplicate_method(self):
        """Test a method listed twice is rejected"""
        with pytest.raises(ValidationError):
            ExperimentConfig(generator=GeneratorConfig(), methods=(Method.CQR, Method.CQR))

    def test_oracle_needs_generator(self):
        """Test the oracle is refused for real data"""
        with pytest.raises(ValidationError):
            _real_config(methods=(Method.ORACLE,))

    def test_alpha_range(self):
        """Test alpha must lie strictly inside (0, 1)"""
        for alpha in (0.0, 1.0, -0.1):
            with pytest.raises(ValidationError):
                ExperimentConfig(generator=GeneratorConfig(), alpha=alpha)

    def test_bad_sections(self):
        """Test section validators"""
        with pytest.raises(ValidationError):
            SizesConfig(train=1)
        with pytest.raises(ValidationError):
            GeneratorConfig(missing_rate=1.5)
        with pytest.raises(ValidationError):
            EvalConfig(per_pattern=0)
        with pytest.raises(ValidationError):
            DatasetConfig(path=Path("d.csv"), target="y", na_tokens=())

    def test_partition_mask_pairs_with_fixed_mode(self):
        """Test partition_mask is given exactly when the mode is fixed"""
        with pytest.raises(ValidationError):
            EvalConfig(partition_mode=PatternChoiceMode.FIXED)
        with pytest.raises(ValidationError):
            EvalConfig(partition_mask="011")
        cfg = EvalConfig(partition_mode=PatternChoiceMode.FIXED, partition_mask="011")
        assert cfg.pattern_choice(0).mask == MaskPattern.from_key("011")

    def test_resolve(self):
        """Test auto mode picks masks for small d and sizes otherwise"""
        assert EvalConfig().resolve(3) == (EvalMode.MASK, 500)
        assert EvalConfig().resolve(5) == (EvalMode.SIZE, 100)
        assert EvalConfig(per_pattern=7).resolve(5) == (EvalMode.SIZE, 7)
        assert EvalConfig(mode=EvalMode.SIZE).resolve(2) == (EvalMode.SIZE, 100)

    def test_empty_na_token_allowed(self):
        """Test the empty string survives as an NA token"""
        cfg = DatasetConfig(path=Path("d.csv"), target="y", na_tokens=("", "NA"))
        assert cfg.na_tokens == ("", "NA")


class TestEvalMasks:
    """Tests for eval_masks"""

    def test_mask_mode(self):
        """Test every mask but the all-missing one appears per_pattern times"""
        cfg = _synthetic_config(evaluation=EvalConfig(mode=EvalMode.MASK, per_pattern=4))
        masks = eval_masks(cfg, 3, None, np.random.default_rng(0))
        assert masks.shape == (28, 3)
        keys, counts = np.unique(masks, axis=0, return_counts=True)
        assert len(keys) == 7
        assert not np.any(keys.all(axis=1))
        assert set(counts) == {4}

    def test_mask_mode_with_all_missing(self):
        """Test include_all_missing adds the all-missing mask"""
        cfg = _synthetic_config(
            evaluation=EvalConfig(mode=EvalMode.MASK, per_pattern=2, include_all_missing=True)
        )
        assert eval_masks(cfg, 3, None, np.random.default_rng(0)).shape == (16, 3)

    def test_size_mode(self):
        """Test per_pattern masks per pattern size"""
        cfg = _synthetic_config(evaluation=EvalConfig(mode=EvalMode.SIZE, per_pattern=6))
        masks = eval_masks(cfg, 5, None, np.random.default_rng(0))
        assert masks.shape == (30, 5)
        assert sorted(np.bincount(masks.sum(axis=1))) == [6] * 5


class TestDrawSyntheticRepetition:
    """Tests for draw_synthetic_repetition"""

    def test_shapes(self):
        """Test pool, split and test sizes follow the config"""
        data = draw_synthetic_repetition(_synthetic_config(), 0)
        assert data.pool.size == 300
        assert data.pool.split is not None
        assert len(data.pool.split.train) == 200
        assert len(data.pool.split.cal) == 100
        assert data.marginal_test.size == 200
        assert data.conditional_test.size == 7 * 20
        assert data.seed == 11

    def test_deterministic(self):
        """Test the same config and repetition draw the same data"""
        a = draw_synthetic_repetition(_synthetic_config(), 2)
        b = draw_synthetic_repetition(_synthetic_config(), 2)
        np.testing.assert_array_equal(a.pool.features, b.pool.features)
        np.testing.assert_array_equal(a.conditional_test.masks, b.conditional_test.masks)
        np.testing.assert_array_equal(a.marginal_test.responses, b.marginal_test.responses)
        assert a.pool.split == b.pool.split

    def test_repetitions_differ(self):
        """Test repetitions use different seeds"""
        a = draw_synthetic_repetition(_synthetic_config(), 0)
        b = draw_synthetic_repetition(_synthetic_config(), 1)
        assert b.seed == a.seed + 1
        assert not np.array_equal(a.pool.responses, b.pool.responses)

    def test_conditional_cells_masked(self):
        """Test conditional-test features are NaN exactly under the masks"""
        test = draw_synthetic_repetition(_synthetic_config(), 0).conditional_test
        np.testing.assert_array_equal(np.isnan(test.features), test.masks)

    def test_needs_generator(self):
        """Test a real-data config is refused"""
        with pytest.raises(ValueError):
            draw_synthetic_repetition(_real_config(), 0)


class TestDrawRealRepetition:
    """Tests for draw_real_repetition"""

    def test_shapes(self):
        """Test pool and test sizes and the injected masks"""
        dataset = linear_dataset(n=400, rate=0.05, seed=1)
        data = draw_real_repetition(_real_config(), dataset, 0)
        assert data.pool.size == 250
        assert data.pool.split is not None
        assert len(data.pool.split.cal) == 100
        assert data.marginal_test.size == 100
        assert 0 < data.conditional_test.size <= 7 * 5
        assert data.pool.masks.mean() > dataset.masks.mean()

    def test_conditional_rows_carry_their_masks(self):
        """Test conditional rows are masked exactly where their mask says"""
        dataset = linear_dataset(n=400, rate=0.05, seed=1)
        test = draw_real_repetition(_real_config(), dataset, 0).conditional_test
        np.testing.assert_array_equal(np.isnan(test.features), test.masks)

    def test_deterministic(self):
        """Test the same repetition draws the same rows"""
        dataset = linear_dataset(n=400, rate=0.05, seed=1)
        a = draw_real_repetition(_real_config(), dataset, 1)
        b = draw_real_repetition(_real_config(), dataset, 1)
        np.testing.assert_array_equal(a.pool.responses, b.pool.responses)
        np.testing.assert_array_equal(a.conditional_test.masks, b.conditional_test.masks)

    def test_too_few_rows(self):
        """Test a dataset smaller than train+cal is refused"""
        with pytest.raises(ValueError):
            draw_real_repetition(_real_config(), linear_dataset(n=250), 0)

    def test_short_test_set_warns(self, caplog):
        """Test a truncated test set is logged"""
        cfg = _real_config(sizes=SizesConfig(train=150, cal=100, test=1000))
        with caplog.at_level(logging.WARNING):
            data = draw_real_repetition(cfg, linear_dataset(n=400, rate=0.05, seed=1), 0)
        assert data.marginal_test.size == 150
        assert "only 150 rows" in caplog.text


class TestRunExperiment:
    """Tests for run_repetition and run_experiment"""

    def test_reports_ordered(self):
        """Test one report per method per repetition, ordered by repetition then method"""
        cfg = _synthetic_config(
            methods=(Method.ORACLE, Method.CQR, Method.CQR_MDA_EXACT), repetitions=2
        )
        reports = run_experiment(cfg)
        assert [(r.repetition, r.method) for r in reports] == [
            (0, Method.CQR),
            (0, Method.CQR_MDA_EXACT),
            (0, Method.ORACLE),
            (1, Method.CQR),
            (1, Method.CQR_MDA_EXACT),
            (1, Method.ORACLE),
        ]
        assert [r.seed for r in reports] == [11, 11, 11, 12, 12, 12]

    def test_emitted_groups(self):
        """Test emitted records are the marginal group then mask and size groups"""
        reports = run_experiment(_synthetic_config(methods=(Method.CQR,)))
        groups = [r.group for r in reports[0].emitted_records()]
        assert groups[0] == "marginal"
        assert len([g for g in groups if g.startswith("mask:")]) == 7
        assert [g for g in groups if g.startswith("size:")] == ["size:0", "size:1", "size:2"]

    def test_oracle_lengths(self):
        """Test the oracle's per-mask lengths match the closed form"""
        cfg = _synthetic_config(methods=(Method.ORACLE,))
        report = run_experiment(cfg)[0]
        params = cfg.generator.params()
        for m in enumerate_masks(3, include_all_missing=False):
            record = report.conditional.record(f"mask:{m.key}")
            assert record.mean_length == pytest.approx(oracle_length(params, m, cfg.alpha))
            assert record.infinite_fraction == 0.0

    def test_all_methods_run(self):
        """Test every method produces valid reports"""
        cfg = _synthetic_config(methods=tuple(Method))
        reports = run_experiment(cfg)
        assert {r.method for r in reports} == set(Method)
        for r in reports:
            assert 0.0 <= r.marginal.marginal.coverage <= 1.0

    def test_deterministic(self):
        """Test reruns give identical records"""
        cfg = _synthetic_config(methods=(Method.CQR_MDA_NESTED,))
        a = reports_frame(run_experiment(cfg))
        b = reports_frame(run_experiment(cfg))
        pd.testing.assert_frame_equal(a, b)

    def test_prepared_repetitions(self):
        """Test pre-drawn repetitions give the same results as drawing them"""
        cfg = _synthetic_config(methods=(Method.CQR,))
        data = [draw_synthetic_repetition(cfg, 0)]
        pd.testing.assert_frame_equal(
            reports_frame(run_experiment(cfg, repetitions=data)),
            reports_frame(run_experiment(cfg)),
        )

    def test_repetition_count_mismatch(self):
        """Test the number of supplied repetitions must match the config"""
        cfg = _synthetic_config(methods=(Method.CQR,), repetitions=2)
        with pytest.raises(ValueError):
            run_experiment(cfg, repetitions=[draw_synthetic_repetition(cfg, 0)])

    def test_real_config_needs_dataset(self):
        """Test a dataset config without the loaded data is refused"""
        with pytest.raises(ValueError):
            run_experiment(_real_config(methods=(Method.CQR,)))

    def test_real_data(self):
        """Test a real-data run reports every method"""
        cfg = _real_config(methods=(Method.CQR, Method.CQR_MDA_EXACT, Method.MEAN_SCP))
        reports = run_experiment(cfg, dataset=linear_dataset(n=400, rate=0.05, seed=1))
        assert [r.method for r in reports] == [
            Method.CQR,
            Method.CQR_MDA_EXACT,
            Method.MEAN_SCP,
        ]

    def test_method_failure_is_wrapped(self):
        """Test a failing method raises ExperimentError naming it"""
        cfg = _synthetic_config(methods=(Method.ORACLE,))
        data = draw_synthetic_repetition(cfg, 0)
        with pytest.raises(ExperimentError) as info:
            run_repetition(cfg, data, params=None)
        assert info.value.method == "oracle"
        assert info.value.repetition == 0
        assert "oracle" in str(info.value)

    def test_experiment_error_pickles(self):
        """Test ExperimentError survives a trip between worker processes"""
        err = pickle.loads(pickle.dumps(ExperimentError(3, "cqr", "boom")))
        assert (err.repetition, err.method, err.detail) == (3, "cqr", "boom")

    @pytest.mark.slow
    def test_parallel_matches_serial(self):
        """Test joblib workers give the same records as a serial run"""
        cfg = _synthetic_config(methods=(Method.CQR, Method.CQR_MDA_EXACT), repetitions=2)
        pd.testing.assert_frame_equal(
            reports_frame(run_experiment(cfg, n_jobs=2)),
            reports_frame(run_experiment(cfg, n_jobs=1)),
        )


class TestAggregate:
    """Tests for aggregate_results"""

    def _frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "method": ["cqr", "cqr", "cqr", "qr"],
                "repetition": [0, 1, 0, 0],
                "group": ["marginal", "marginal", "mask:01", "marginal"],
                "n_test": [100, 100, 20, 100],
                "coverage": [0.8, 0.9, 0.85, 0.7],
                "mean_length": [2.0, 4.0, 3.0, 1.0],
                "infinite_fraction": [0.0, 0.5, 0.0, 0.0],
                "seed": [0, 1, 0, 0],
            }
        )

    def test_means_and_mcse(self):
        """Test means over repetitions and std(ddof=1)/sqrt(R)"""
        out = aggregate_results(self._frame())
        row = out[(out.method == "cqr") & (out.group == "marginal")].iloc[0]
        assert row.repetitions == 2
        assert row.coverage == pytest.approx(0.85)
        assert row.mean_length == pytest.approx(3.0)
        assert row.infinite_fraction == pytest.approx(0.25)
        assert row.mcse == pytest.approx(0.05)

    def test_single_repetition(self):
        """Test one repetition leaves the standard error undefined"""
        out = aggregate_results(self._frame())
        row = out[out.method == "qr"].iloc[0]
        assert math.isnan(row.mcse)
        assert "clamped_mean_length" not in out.columns

    def test_sorted_groups(self):
        """Test output rows are sorted by method then group"""
        out = aggregate_results(self._frame())
        assert list(zip(out.method, out.group)) == [
            ("cqr", "marginal"),
            ("cqr", "mask:01"),
            ("qr", "marginal"),
        ]

    def test_clamped_length(self):
        """Test reports_frame carries the clamped length through to the summary"""
        cfg = _synthetic_config(methods=(Method.CQR,))
        out = aggregate_results(reports_frame(run_experiment(cfg)))
        assert "clamped_mean_length" in out.columns
        assert out["clamped_mean_length"].notna().all()
