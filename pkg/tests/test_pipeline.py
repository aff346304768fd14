import json

import numpy as np
import pytest

from conftest import small_run_config
from survens import pipeline
from survens.config import build_config
from survens.errors import EmptySelection, ValidationError
from survens.features import Scenario
from survens.pipeline import (
    COLUMNS,
    RunReport,
    _CellOutput,
    derive_seed,
    run,
    split_train_test,
    subgroup_eval,
)
from survens.synth import generate

SUBGROUP = {"subgroup": {"column": "age", "bins": [60, 75, 91]}}


def subgroup_config(**extra):
    return small_run_config(**{"synth.age_range": [61, 90], **SUBGROUP, **extra})


def strip_times(d):
    d = json.loads(json.dumps(d))
    for key in ("started", "finished"):
        d["provenance"].pop(key)
    return d


@pytest.fixture(scope="module")
def small_run():
    cfg = subgroup_config()
    cohort, _ = generate(cfg.synth)
    return cfg, cohort, run(cfg, cohort)


class TestSeeds:
    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(0, "mice") == derive_seed(0, "mice")
        assert derive_seed(0, "mice") != derive_seed(1, "mice")
        assert derive_seed(0, "rsf", "m0") != derive_seed(0, "rsf", "m1")
        assert 0 <= derive_seed(7, "x") < 2**63

    def test_split_is_stratified(self, rng):
        event = rng.uniform(size=500) < 0.4
        train, test = split_train_test(event, 0.2, seed=3)
        assert np.intersect1d(train, test).size == 0 and train.size + test.size == 500
        assert test.size == pytest.approx(100, abs=1)
        assert abs(event[test].mean() - event.mean()) < 0.01


class TestRun:
    def test_deterministic_modulo_timestamps(self, small_run):
        cfg, cohort, report = small_run
        again = run(cfg, cohort)
        assert strip_times(again.to_json()) == strip_times(report.to_json())
        assert again.to_csv() == report.to_csv()

    def test_one_estimate_per_imputation(self, small_run):
        cfg, _, report = small_run
        assert len(report.cells) == len(cfg.scenarios) * len(cfg.penalties) * len(COLUMNS)
        for cell in report.cells:
            assert cell.error is None
            assert len(cell.per_imputation) == cfg.m_imputations
            assert cell.cindex.m == cfg.m_imputations
            assert 0 <= cell.cindex.mean <= 1 and cell.cindex.ci_low <= cell.cindex.ci_high

    def test_scenario_selection_nests(self, small_run):
        _, _, report = small_run
        for sel in report.selection:
            for names in sel["per_imputation"]:
                if sel["scenario"] == Scenario.BaselineOnly.value:
                    assert not any("_d" in n for n in names)
                else:
                    assert not any(n.endswith("_d12") for n in names)

    def test_weights_recorded(self, small_run):
        _, _, report = small_run
        for entry in report.bma_weights:
            for w in entry["per_imputation"]:
                assert len(w) == 3 and sum(w) == pytest.approx(1.0)

    def test_no_test_rows_enter_fitting(self):
        cfg = small_run_config(**{"run.scenarios": ["2visits"]})
        cohort, _ = generate(cfg.synth)
        seen = []
        report = run(cfg, cohort, audit=lambda stage, ds: seen.append((stage, set(ds.ids))))
        test_ids = set(report.provenance["test_ids"])
        stages = {stage for stage, _ in seen}
        assert stages == {"standardizer", "coxnet_cv", "feature_selection", "bma_weights", "model_fit"}
        for stage, ids in seen:
            assert not ids & test_ids, stage

    def test_failing_cell_is_isolated(self, monkeypatch):
        cfg = small_run_config(**{"run.scenarios": ["baseline"], "run.penalties": ["lasso", "elasticnet"]})
        cohort, _ = generate(cfg.synth)
        real = pipeline.fit_coxnet

        def flaky(train, alpha, *args, **kwargs):
            if alpha == 1.0:
                raise EmptySelection("forced failure")
            return real(train, alpha, *args, **kwargs)

        monkeypatch.setattr(pipeline, "fit_coxnet", flaky)
        report = run(cfg, cohort)
        for cell in report.cells:
            if cell.penalty == "lasso":
                assert "EmptySelection" in cell.error and cell.cindex is None
            else:
                assert cell.error is None and cell.cindex is not None
        assert ",,," in report.to_csv()

    def test_report_round_trip(self, small_run, tmp_path):
        _, _, report = small_run
        report.save(tmp_path / "r.json")
        back = RunReport.load(tmp_path / "r.json")
        assert back.to_csv() == report.to_csv()
        assert back.to_wide_csv("iauc") == report.to_wide_csv("iauc")
        assert back.to_csv(subgroup=True) == report.to_csv(subgroup=True)

    def test_csv_shapes(self, small_run):
        cfg, _, report = small_run
        long_rows = report.to_csv().splitlines()
        assert long_rows[0].split(",") == list(pipeline.CSV_HEADER)
        assert len(long_rows) == 1 + len(report.cells)
        wide = report.to_wide_csv().splitlines()
        assert wide[0] == "scenario,penalty,RSF,DeepSurv,XGBoost,EA,BMA"
        assert len(wide) == 1 + len(cfg.scenarios) * len(cfg.penalties)


class TestSubgroups:
    def test_bins_partition_pairs(self, small_run):
        _, _, report = small_run
        for cell in report.cells:
            per_bin = [
                c for c in report.subgroup_cells()
                if (c.scenario, c.penalty, c.label) == (cell.scenario, cell.penalty, cell.label) and c.error is None
            ]
            assert per_bin
            for m in range(len(cell.per_imputation)):
                total = sum(c.per_imputation[m]["pairs"] for c in per_bin)
                assert total <= cell.per_imputation[m]["pairs"]

    def test_single_full_bin_equals_global(self):
        cfg = subgroup_config(**{"synth.missing_rate": 0.0, "subgroup": {"column": "age", "bins": [0, 200]}})
        cohort, _ = generate(cfg.synth)
        report = run(cfg, cohort)
        assert report.subgroups["dropped"] == 0
        for cell in report.cells:
            sub = report.cell(cell.scenario, cell.penalty, cell.label, bin="0-200")
            assert sub.cindex.mean == cell.cindex.mean
            assert sub.cindex.ci_low == cell.cindex.ci_low
            assert sub.iauc.mean == cell.iauc.mean

    def test_noisier_bin_scores_lower(self, rng):
        n = 600
        time = rng.exponential(10, n)
        event = rng.uniform(size=n) < 0.7
        age = rng.uniform(61, 90, n)
        old = age >= 80
        noise = np.where(old, 20.0, 0.5) * rng.standard_normal(n)
        scores = -np.log(time) + noise
        train_idx, test_idx = np.arange(0, 300), np.arange(300, n)
        folds = np.arange(300) % 3
        outputs = {}
        per_m = []
        for _ in range(2):
            out = _CellOutput("2visits", "lasso")
            out.test_scores = {label: scores[test_idx] for label in COLUMNS}
            out.fold_scores = [
                (np.flatnonzero(folds == k), {label: scores[train_idx][folds == k] for label in COLUMNS})
                for k in range(3)
            ]
            per_m.append(out)
        outputs[("2visits", "lasso")] = per_m
        result = subgroup_eval(outputs, age, [61, 80, 91], train_idx, test_idx, time, event)
        by_bin = {c["bin"]: c for c in result["cells"] if c["model"] == "RSF"}
        assert by_bin["80-91"]["cindex"]["mean"] < by_bin["61-80"]["cindex"]["mean"] - 0.1

    def test_empty_bin_flagged(self, small_run):
        cfg, cohort, _ = small_run
        cfg2 = subgroup_config(**{"subgroup": {"column": "age", "bins": [60, 91, 120]}})
        report = run(cfg2, cohort)
        empty = [c for c in report.subgroup_cells() if c.bin == "91-120"]
        assert empty and all("EmptyBin" in c.error for c in empty)
        assert all(c.error is None for c in report.subgroup_cells() if c.bin == "60-91")


class TestConfig:
    def test_unknown_key_named(self):
        with pytest.raises(ValidationError, match="run.bogus"):
            build_config({"synth": {}, "run": {"bogus": 1}})

    def test_single_imputation_rejected(self):
        with pytest.raises(ValidationError):
            small_run_config(**{"run.m_imputations": 1})

    def test_bad_penalty(self):
        with pytest.raises(ValidationError):
            small_run_config(**{"run.penalties": ["ridge"]})

    def test_needs_data(self):
        with pytest.raises(ValidationError):
            build_config({})
