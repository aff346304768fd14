"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the pytest terminal summary.
"""

import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ph_dataset, small_run_config
from oracles import brute_cindex, central_difference, unweighted_auc
from survens.config import build_config
from survens.coxnet import fit_path
from survens.dataset import SurvivalDataset
from survens.deepsurv import MlpConfig, fit_deepsurv, init_params, loss_and_grads
from survens.ensemble import (
    BmaWeights,
    RiskScores,
    aggregate_bma,
    aggregate_ea,
    bma_weights_from_nll,
    normalize,
)
from survens.gbcox import cox_grad_hess, fit_gbcox
from survens.impute import pool
from survens.metrics import auc_curve, c_index, integrate_curve
from survens.partial_likelihood import cox_nll
from survens.pipeline import COLUMNS, run, split_train_test
from survens.rsf import fit_rsf
from survens.synth import generate


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_gradient_correctness(criterion, rng):
    start = time.perf_counter()
    n, p = 20, 5
    worst = 0.0
    probes = 0
    for trial in range(4):
        x = rng.standard_normal((n, p))
        t = rng.exponential(5, n)
        e = rng.uniform(size=n) < 0.7
        e[0] = True
        cfg = MlpConfig(layer_widths=[6, 4], activation="tanh", weight_init_seed=trial)
        params = init_params(p, cfg)
        _, grads = loss_and_grads(params, x, t, e, cfg.activation)
        for _ in range(10):
            k = int(rng.integers(len(params)))
            idx = tuple(int(rng.integers(s)) for s in params[k].shape)

            def loss(v, k=k, idx=idx):
                trial_params = [q.copy() for q in params]
                trial_params[k][idx] = v[0]
                return loss_and_grads(trial_params, x, t, e, cfg.activation)[0]

            fd = central_difference(loss, np.array([params[k][idx]]))[0]
            worst = max(worst, rel_err(grads[k][idx], fd))
            probes += 1

        eta = rng.normal(size=n)
        g, h = cox_grad_hess(eta, t, e)
        g_fd = central_difference(lambda v: cox_nll(v, t, e), eta)
        for i in rng.choice(n, 5, replace=False):
            h_fd = central_difference(lambda v, i=i: cox_grad_hess(v, t, e)[0][i], eta)[i]
            worst = max(worst, rel_err(g[i], g_fd[i]), rel_err(h[i], h_fd))
            probes += 2
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and probes >= 20 and elapsed < 10
    criterion(1, ok, f"{probes} probes, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_metric_oracles(criterion, rng):
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        time_ = rng.integers(1, 5, n).astype(float)
        event = rng.uniform(size=n) < 0.6
        event[0] = True
        time_[0] = time_.min() - 1 if rng.uniform() < 0.5 else time_[0]
        s = rng.integers(0, 4, n).astype(float)
        exact, pairs = brute_cindex(s, time_, event)
        if pairs == 0:
            continue
        mismatches += c_index(s, time_, event) != float(exact)

    auc_diff = 0.0
    for _ in range(20):
        time_ = rng.integers(1, 40, 80).astype(float)
        s = rng.normal(size=80)
        grid = np.linspace(2, 38, 30)
        curve = auc_curve(s, time_, np.ones(80, bool), grid=grid)
        for t, a, d in zip(grid, curve.auc, curve.defined):
            ref = unweighted_auc(s, time_, np.ones(80, bool), t)
            if (ref is None) == d:
                auc_diff = np.inf
            elif d:
                auc_diff = max(auc_diff, abs(a - ref))

    const_err = abs(integrate_curve(np.sort(rng.uniform(0, 50, 100)), np.full(100, 0.6180339887)) - 0.6180339887)
    ok = mismatches == 0 and auc_diff == 0.0 and const_err <= 1e-12
    criterion(2, ok, f"C-index mismatches {mismatches}/200, max AUC diff {auc_diff:.1e}, constant iAUC error {const_err:.1e}")
    assert ok


def test_nelson_aalen_leaves(criterion):
    leaves = [
        ([2.0, 3.0, 5.0], [1, 0, 1], {2.0: Fraction(1, 3), 5.0: Fraction(4, 3)}),
        ([1.0, 1.0, 2.0, 4.0], [1, 1, 0, 1], {1.0: Fraction(1, 2), 4.0: Fraction(3, 2)}),
        ([1.0, 2.0, 3.0, 3.0, 6.0], [0, 1, 1, 0, 1], {2.0: Fraction(1, 4), 3.0: Fraction(7, 12), 6.0: Fraction(19, 12)}),
    ]
    worst = 0.0
    for time_, event, expected in leaves:
        ds = SurvivalDataset(np.zeros((len(time_), 1)), ["x"], time_, event)
        model = fit_rsf(ds, b=1, min_node_events=1, bootstrap=False)
        assert model.trees[0].tree.n_nodes == 1
        for t, h in expected.items():
            got = model.predict_cumhaz(ds.x[:1], t)[0]
            worst = max(worst, abs(Fraction(got) - h) / h)
    # exact up to the last bit of the float representation of the rationals
    ok = worst <= 2**-52
    criterion(3, ok, f"3 leaves of 3-5 samples, worst relative deviation from exact rationals {float(worst):.1e}")
    assert ok


def test_rubin_closed_form(criterion):
    from scipy import stats

    p = pool([(0.8, 0.04), (1.0, 0.04)])
    half = stats.t.ppf(0.975, 7 / 3) * np.sqrt(0.07)
    expected = (0.9, 0.04, 0.02, 0.07, 7 / 3, 0.9 - half, 0.9 + half)
    got = (p.mean, p.within_var, p.between_var, p.total_var, p.df, p.ci_low, p.ci_high)
    worst = max(abs(a - b) for a, b in zip(got, expected))
    ok = worst <= 1e-12
    criterion(4, ok, f"M=2 example, max deviation {worst:.1e}")
    assert ok


def test_recovery_on_synth(criterion):
    start = time.perf_counter()
    beta = np.r_[1.0, -1.0, 1.0, -1.0, 1.0, np.zeros(20)]
    rows = []
    ok = True
    for seed in range(5):
        ds, _ = ph_dataset(2000, beta, seed=seed, censor_rate=0.3)
        train_idx, test_idx = split_train_test(ds.event, 0.2, seed)
        train, test = ds.rows(train_idx), ds.rows(test_idx)
        gb = fit_gbcox(train, n_rounds=100, learning_rate=0.1, max_depth=2)
        ds_model = fit_deepsurv(train, MlpConfig(layer_widths=[16], dropout=0.1, learning_rate=0.01, epochs=200, weight_init_seed=seed))
        c_gb = c_index(gb.predict(test.x), test.time, test.event)
        c_ds = c_index(ds_model.risk_score(test.x), test.time, test.event)
        [(_, b)] = fit_path(ds, 1.0, [0.0])
        err = float(np.abs(b - beta).max())
        rows.append(f"seed {seed}: gbcox {c_gb:.3f} DeepSurv {c_ds:.3f} max|beta err| {err:.3f}")
        ok &= c_gb > 0.75 and c_ds > 0.75 and err <= 0.1
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    criterion(5, ok, f"5 seeds in {elapsed:.0f}s; " + "; ".join(rows))
    assert ok


def trend_config(seed):
    return build_config(
        {
            "synth": {
                "n_subjects": 1000,
                "n_numeric": 6,
                "true_beta": [0.3, 0.0, 0.0, 0.0, 0.0, 0.0],
                "slope_beta": [8.0, -8.0, 6.0, 0.0, 0.0, 0.0],
                "slope_sd": 0.1,
                "measurement_noise_sd": 0.6,
                "censor_rate": 0.5,
                "missing_rate": 0.05,
                "visit_jitter_sd": 0.5,
                "seed": seed,
            },
            "run": {
                "scenarios": ["baseline", "2visits", "3visits"],
                "penalties": ["elasticnet"],
                "m_imputations": 3,
                "mice_iterations": 10,
                "cv_folds": 5,
                "seed": seed,
            },
            "coxnet": {"n_lambda": 30},
            "rsf": {"b": 30},
            "deepsurv": {"layer_widths": [16], "learning_rate": 0.01, "epochs": 150},
            "gbcox": {"n_rounds": 60},
        }
    )


@pytest.mark.slow
def test_scenario_trend(criterion):
    start = time.perf_counter()
    ordered = {"EA": 0, "BMA": 0}
    diminishing = {"EA": 0, "BMA": 0}
    rows = []
    for seed in range(10):
        cfg = trend_config(seed)
        report = run(cfg, generate(cfg.synth)[0])
        for agg in ("EA", "BMA"):
            c = [report.cell(s, "elasticnet", agg).cindex.mean for s in ("baseline", "2visits", "3visits")]
            ordered[agg] += c[0] < c[1] < c[2]
            diminishing[agg] += (c[1] - c[0]) > (c[2] - c[1])
            rows.append(f"{seed}/{agg} " + "<".join(f"{v:.3f}" for v in c))
    elapsed = time.perf_counter() - start
    ok = all(ordered[a] >= 9 and diminishing[a] >= 8 for a in ordered) and elapsed < 900
    criterion(
        6,
        ok,
        f"ordering EA {ordered['EA']}/10 BMA {ordered['BMA']}/10, diminishing gain EA {diminishing['EA']}/10 "
        f"BMA {diminishing['BMA']}/10, {elapsed:.0f}s; " + ", ".join(rows),
    )
    assert ok


def test_ensemble_identities(criterion, rng):
    worst_ea = worst_sum = worst_affine = 0.0
    ranks_equal = True
    for _ in range(50):
        raw = [RiskScores(f"m{k}", rng.normal(size=30) * rng.uniform(0.1, 10)) for k in range(3)]
        z = [normalize(r) for r in raw]
        ea = aggregate_ea(z).scores
        bma = aggregate_bma(z, BmaWeights(np.full(3, 1 / 3))).scores
        worst_ea = max(worst_ea, float(np.abs(ea - bma).max()))
        w = bma_weights_from_nll(rng.uniform(0, 500, 3), prior=rng.uniform(0.1, 1, 3))
        worst_sum = max(worst_sum, abs(w.weights.sum() - 1.0))
        shifted = [RiskScores(r.model_id, rng.uniform(0.1, 50) * r.scores + rng.uniform(-100, 100)) for r in raw]
        z2 = [normalize(r) for r in shifted]
        for agg1, agg2 in ((aggregate_ea(z).scores, aggregate_ea(z2).scores), (aggregate_bma(z, w).scores, aggregate_bma(z2, w).scores)):
            worst_affine = max(worst_affine, float(np.abs(agg1 - agg2).max()))
            ranks_equal &= np.array_equal(np.argsort(agg1, kind="stable"), np.argsort(agg2, kind="stable"))
    ok = worst_ea <= 1e-12 and worst_sum <= 1e-12 and ranks_equal and worst_affine <= 1e-12
    criterion(
        7,
        ok,
        f"uniform BMA vs EA {worst_ea:.1e}, weight sum error {worst_sum:.1e}, "
        f"affine rescaling: max score change {worst_affine:.1e}, rankings identical {ranks_equal}",
    )
    assert ok


def null_config():
    return build_config(
        {
            "synth": {
                "n_subjects": 1000,
                "n_numeric": 6,
                "true_beta": [0.0] * 6,
                "slope_beta": [0.0] * 6,
                "slope_sd": 0.1,
                "measurement_noise_sd": 0.3,
                "censor_rate": 0.5,
                "missing_rate": 0.05,
                "visit_jitter_sd": 0.5,
                "seed": 0,
            },
            "run": {"m_imputations": 5, "mice_iterations": 10, "cv_folds": 5, "seed": 0},
            "coxnet": {"n_lambda": 30},
            "rsf": {"b": 30},
            "deepsurv": {"layer_widths": [16], "learning_rate": 0.01, "epochs": 150},
            "gbcox": {"n_rounds": 60},
        }
    )


@pytest.mark.slow
def test_null_calibration(criterion):
    cfg = null_config()
    report = run(cfg, generate(cfg.synth)[0])
    c = [cell.cindex.mean for cell in report.cells]
    a = [cell.iauc.mean for cell in report.cells]
    worst_c = max(abs(v - 0.5) for v in c)
    worst_a = max(abs(v - 0.5) for v in a)
    expected = len(cfg.scenarios) * len(cfg.penalties) * len(COLUMNS)
    ok = len(report.cells) == expected and all(cell.error is None for cell in report.cells) and worst_c <= 0.05 and worst_a <= 0.05
    criterion(
        8,
        ok,
        f"{len(report.cells)} cells at n=1000, M=5: C-index in [{min(c):.3f}, {max(c):.3f}], "
        f"iAUC in [{min(a):.3f}, {max(a):.3f}]",
    )
    assert ok


def test_end_to_end_determinism(criterion, tmp_path):
    settings = [
        "synth.n_subjects=200",
        "run.m_imputations=2",
        "run.mice_iterations=3",
        "run.cv_folds=3",
        "coxnet.n_lambda=8",
        "rsf.b=3",
        "deepsurv.epochs=10",
        "gbcox.n_rounds=5",
        "importance.repeats=1",
    ]
    args = [item for kv in settings for item in ("--set", kv)]
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "survens.cli", "run", *args, "--out", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        outputs.append(out)
    files = sorted(f.name for f in outputs[0].glob("*.csv"))
    same = [(outputs[0] / f).read_bytes() == (outputs[1] / f).read_bytes() for f in files]
    ok = bool(files) and all(same) and files == sorted(f.name for f in outputs[1].glob("*.csv"))
    criterion(9, ok, f"{sum(same)}/{len(files)} report CSVs byte-identical across two `survens run` invocations")
    assert ok


def test_leakage_audit(criterion):
    cfg = small_run_config(**{"run.scenarios": ["baseline", "2visits", "3visits"], "run.penalties": ["lasso", "elasticnet"]})
    cohort, _ = generate(cfg.synth)
    seen = []
    report = run(cfg, cohort, audit=lambda stage, ds: seen.append((stage, set(ds.ids))))
    test_ids = set(report.provenance["test_ids"])
    leaks = [stage for stage, ids in seen if ids & test_ids]
    stages = {stage for stage, _ in seen}
    required = {"standardizer", "coxnet_cv", "feature_selection", "bma_weights", "model_fit"}
    ok = not leaks and required <= stages and len(test_ids) > 0
    criterion(10, ok, f"{len(seen)} fitting calls over stages {sorted(stages)}; test rows seen in {len(leaks)} of them")
    assert ok
