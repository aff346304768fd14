import json
import logging

import numpy as np
import pytest

from survens.dataset import CohortTable, SubjectRecord, SurvivalDataset
from survens.errors import ValidationError
from survens.features import (
    FeatureSpec,
    Scenario,
    apply_standardizer,
    build_design,
    fit_standardizer,
    scenario_columns,
)
from survens.synth import SynthConfig, generate


def cohort_of(rows, names=("x",), categorical=(), static=()):
    subjects = [
        SubjectRecord(f"S{i}", np.asarray(t, float), np.asarray(v, float), 100.0, bool(i % 2))
        for i, (t, v) in enumerate(rows)
    ]
    return CohortTable(subjects, names, categorical, static)


class TestDesign:
    def test_rate_of_change(self):
        c = cohort_of([([0, 6], [[10.0], [13.0]])])
        ds = build_design(c, Scenario.TwoVisits)
        assert ds.feature_names == ["x", "x_d01"]
        assert ds.x[0, 1] == 0.5

    def test_constant_trajectory(self):
        c = cohort_of([([0, 6, 12], [[4.0], [4.0], [4.0]])])
        ds = build_design(c, Scenario.ThreeVisits)
        np.testing.assert_array_equal(ds.x[0, 1:], [0.0, 0.0])

    def test_exact_drift(self):
        c = cohort_of([([0, 6, 12], [[10.0], [11.5], [13.0]])])
        ds = build_design(c, "3visits")
        assert ds.x[0, 1] == 0.25 and ds.x[0, 2] == 0.25

    def test_synth_slopes_recovered(self):
        cfg = SynthConfig(n_subjects=200, n_numeric=2, slope_sd=0.25, seed=6)
        cohort, truth = generate(cfg)
        ds = build_design(cohort, Scenario.TwoVisits)
        have = np.array([s.n_visits >= 2 for s in cohort.subjects])
        d01 = ds.columns(["x1_d01", "x2_d01"]).x
        np.testing.assert_allclose(d01[have], truth.slopes[have], rtol=0, atol=1e-12)
        assert np.isnan(d01[~have]).all()

    def test_missing_visit_gives_nan(self):
        c = cohort_of([([0, 6], [[1.0], [np.nan]]), ([0], [[2.0]])])
        ds = build_design(c, Scenario.ThreeVisits)
        assert np.isnan(ds.x[:, 1:]).all()

    def test_zero_interval_logged(self, caplog):
        # visit times must increase, so build a record that bypasses that check
        s = SubjectRecord("a", np.array([0.0, 6.0]), np.array([[1.0], [2.0]]), 10.0, True)
        object.__setattr__(s, "visit_times", np.array([0.0, 0.0]))
        c = CohortTable([s], ("x",))
        with caplog.at_level(logging.WARNING):
            ds = build_design(c, Scenario.TwoVisits)
        assert np.isnan(ds.x[0, 1])
        assert "zero visit interval" in caplog.text

    def test_categorical_and_static(self):
        rows = [([0, 6], [[1.0, 0.0, 70.0], [2.0, 0.0, 70.0]]), ([0, 6], [[1.0, 2.0, 80.0], [1.0, 2.0, 80.0]])]
        c = cohort_of(rows, names=("x", "g", "age"), categorical=("g",), static=("g", "age"))
        ds = build_design(c, Scenario.TwoVisits)
        assert ds.feature_names == ["x", "g=0", "g=2", "age", "x_d01"]
        np.testing.assert_array_equal(ds.columns(["g=0", "g=2"]).x, [[1, 0], [0, 1]])

    def test_scenarios_nest(self):
        cohort, _ = generate(SynthConfig(n_subjects=30, n_static=1, n_categorical=1, seed=1))
        full = build_design(cohort, Scenario.ThreeVisits).feature_names
        base = scenario_columns(full, Scenario.BaselineOnly)
        two = scenario_columns(full, Scenario.TwoVisits)
        assert set(base) < set(two) < set(full)
        assert build_design(cohort, Scenario.TwoVisits).feature_names == two
        assert build_design(cohort, Scenario.BaselineOnly).feature_names == base

    def test_scenario_parse(self):
        assert Scenario.parse("2visits") is Scenario.TwoVisits
        assert Scenario.parse("ThreeVisits") is Scenario.ThreeVisits
        with pytest.raises(ValidationError):
            Scenario.parse("4visits")


class TestStandardizer:
    def ds(self, col, names=("a",)):
        x = np.asarray(col, float).reshape(len(col), -1)
        return SurvivalDataset(x, list(names), np.arange(1, len(col) + 1), np.ones(len(col)))

    def test_sample_sd(self):
        spec = fit_standardizer(self.ds([1.0, 2.0, 3.0]))
        assert spec.mean[0] == 2.0 and spec.sd[0] == 1.0

    def test_train_becomes_unit(self, rng):
        train = self.ds(rng.normal(5, 3, (50, 2)), ("a", "b"))
        z = apply_standardizer(fit_standardizer(train), train).x
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0, ddof=1), 1, atol=1e-12)

    def test_shifted_test_column(self):
        spec = fit_standardizer(self.ds([1.0, 2.0, 3.0]))
        out = apply_standardizer(spec, self.ds([11.0, 12.0, 13.0]))
        np.testing.assert_array_equal(out.x[:, 0], [9.0, 10.0, 11.0])

    def test_indicators_pass_and_constants_drop(self):
        x = np.array([[1.0, 0.0, 5.0], [2.0, 1.0, 5.0], [4.0, 1.0, 5.0]])
        train = SurvivalDataset(x, ["a", "g=1", "c"], [1, 2, 3], [1, 1, 0])
        spec = fit_standardizer(train)
        assert spec.features == ["a", "g=1"] and spec.dropped == ["c"]
        out = apply_standardizer(spec, train)
        np.testing.assert_array_equal(out.x[:, 1], [0, 1, 1])

    def test_missing_rejected(self):
        with pytest.raises(ValidationError):
            fit_standardizer(self.ds([1.0, np.nan, 3.0]))

    def test_json_round_trip(self):
        x = np.array([[1.0, 7.0], [2.0, 3.0], [4.0, 1.0]])
        spec = fit_standardizer(SurvivalDataset(x, ["a", "b_d01"], [1, 2, 3], [1, 1, 0]))
        back = FeatureSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert back.features == spec.features
        np.testing.assert_array_equal(back.sd, spec.sd)
        assert back.delta01_features == ["b_d01"] and back.base_features == ["a"]
