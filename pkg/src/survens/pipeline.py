"""End-to-end experiment: split, impute, select, fit, aggregate, evaluate, pool.

Layout of one run:

* one stratified train/test split of subjects;
* M MICE imputations of the widest (3-visit) design, covariates only;
* for every imputation and every (scenario, penalty) cell: standardize on
  train, select features with a cross-validated coxnet, then fit RSF,
  DeepSurv and gbcox on train and score the test rows;
* the same K training folds supply BMA weights and the within-imputation
  variance of each metric (variance of the fold metrics over K);
* per-imputation test metrics are pooled across imputations by Rubin's rules.

Randomness fans out from ``cfg.seed`` through :func:`derive_seed`, keyed by
the label of the step (``"mice"``, ``"rsf/m3/2visits/lasso/fold1"``, ...),
so any cell can be rerun on its own and reproduce the same numbers.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .config import RunConfig
from .coxnet import fit_coxnet, lambda_grid, stratified_folds, top_k_features
from .dataset import CohortTable, SurvivalDataset, truncate_visits
from .deepsurv import MlpConfig, fit_deepsurv
from .ensemble import RiskScores, aggregate_bma, aggregate_ea, average_weights, compute_bma_weights, normalize
from .errors import EmptyBin, SurvensError, ValidationError
from .features import Scenario, apply_standardizer, build_design, fit_standardizer, scenario_columns
from .gbcox import fit_gbcox
from .impute import PooledEstimate, mice, pool
from .metrics import auc_curve, concordance_counts, permutation_importance
from .rsf import fit_rsf

log = logging.getLogger(__name__)

BASE_MODELS = ("RSF", "DeepSurv", "XGBoost")
AGGREGATES = ("EA", "BMA")
COLUMNS = BASE_MODELS + AGGREGATES
CSV_VERSION = 1
CSV_HEADER = (
    "scenario",
    "penalty",
    "model",
    "agg",
    "cindex_mean",
    "cindex_lo",
    "cindex_hi",
    "iauc_mean",
    "iauc_lo",
    "iauc_hi",
)
PENALTY_LABEL = {"lasso": "Lasso", "elasticnet": "ElasticNet"}

AuditHook = Callable[[str, SurvivalDataset], None]


def derive_seed(seed: int, *labels) -> int:
    """63-bit seed from the global seed and a step label (sha256 of both)."""
    text = "|".join([str(int(seed)), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def split_train_test(event, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of a split stratified on the event indicator."""
    event = np.asarray(event, bool)
    rng = np.random.default_rng(seed)
    test = []
    for flag in (True, False):
        idx = np.flatnonzero(event == flag)
        idx = idx[rng.permutation(idx.size)]
        test.append(idx[: int(round(test_fraction * idx.size))])
    test_idx = np.sort(np.concatenate(test))
    mask = np.zeros(event.size, bool)
    mask[test_idx] = True
    train_idx = np.flatnonzero(~mask)
    if not event[train_idx].any() or not event[test_idx].any():
        raise ValidationError("train and test splits each need at least one event")
    return train_idx, test_idx


# ---------------------------------------------------------------- one cell


def _label(model: str, agg: str) -> str:
    return agg if agg != "none" else model


@dataclass
class _CellOutput:
    scenario: str
    penalty: str
    selected: list[str] = field(default_factory=list)
    fallback: bool = False
    weights: list[float] = field(default_factory=list)
    test_scores: dict[str, np.ndarray] = field(default_factory=dict)
    fold_scores: list[tuple[np.ndarray, dict[str, np.ndarray]]] = field(default_factory=list)
    importance: dict | None = None
    error: str | None = None


def _fit_models(train: SurvivalDataset, cfg: RunConfig, key: tuple) -> dict:
    rsf = cfg.rsf
    mlp = MlpConfig(**cfg.deepsurv, weight_init_seed=derive_seed(cfg.seed, "deepsurv", *key) % 2**32)
    return {
        "RSF": fit_rsf(
            train,
            b=int(rsf["b"]),
            mtry=rsf["mtry"],
            min_node_events=int(rsf["min_node_events"]),
            seed=derive_seed(cfg.seed, "rsf", *key),
            max_depth=rsf["max_depth"],
        ),
        "DeepSurv": fit_deepsurv(train, mlp),
        "XGBoost": fit_gbcox(train, **cfg.gbcox, seed=derive_seed(cfg.seed, "gbcox", *key)),
    }


def _raw_scores(models: dict, x: np.ndarray) -> list[RiskScores]:
    return [RiskScores(name, models[name].risk_score(x)) for name in BASE_MODELS]


def _with_ensembles(raw: list[RiskScores], weights) -> dict[str, np.ndarray]:
    """Raw base-model scores plus EA and BMA of their z-normalized versions."""
    z = [normalize(rs) for rs in raw]
    out = {rs.model_id: rs.scores for rs in raw}
    out["EA"] = aggregate_ea(z).scores
    out["BMA"] = aggregate_bma(z, weights).scores
    return out


def _run_cell(
    design: SurvivalDataset,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    fold_labels: np.ndarray,
    scenario: Scenario,
    penalty: str,
    m: int,
    cfg: RunConfig,
    audit: AuditHook | None,
) -> _CellOutput:
    out = _CellOutput(scenario.value, penalty)
    key = (f"m{m}", scenario.value, penalty)
    ds = design.columns(scenario_columns(design.feature_names, scenario))
    train_raw, test_raw = ds.rows(train_idx), ds.rows(test_idx)
    if audit:
        audit("standardizer", train_raw)
    spec = fit_standardizer(train_raw)
    train, test = apply_standardizer(spec, train_raw), apply_standardizer(spec, test_raw)

    alpha = cfg.alpha(penalty)
    lambdas = lambda_grid(train, alpha, int(cfg.coxnet["n_lambda"]), float(cfg.coxnet["lambda_min_ratio"]))
    if audit:
        audit("coxnet_cv", train)
        audit("feature_selection", train)
    fit = fit_coxnet(train, alpha, lambdas, cfg.cv_folds, folds=fold_labels)
    names = fit.selected_names
    if not names:
        names = top_k_features(fit, cfg.top_k)
        out.fallback = True
        log.info("%s: empty selection, using top %d path entries", "/".join(key), cfg.top_k)
    out.selected = list(names)
    train, test = train.columns(names), test.columns(names)

    fold_raw = []
    fold_weights = []
    for k in range(cfg.cv_folds):
        val_rows = np.flatnonzero(fold_labels == k)
        fit_rows = np.flatnonzero(fold_labels != k)
        fold_train, fold_val = train.rows(fit_rows), train.rows(val_rows)
        if audit:
            audit("model_fit", fold_train)
            audit("bma_weights", fold_val)
        models = _fit_models(fold_train, cfg, (*key, f"fold{k}"))
        raw = _raw_scores(models, fold_val.x)
        fold_raw.append((val_rows, raw))
        if fold_val.event.any():
            fold_weights.append(compute_bma_weights(raw, fold_val.time, fold_val.event))
    if not fold_weights:
        raise ValidationError("no validation fold has an event; BMA weights undefined")
    weights = average_weights(fold_weights)
    out.weights = weights.weights.tolist()
    out.fold_scores = [(rows, _with_ensembles(raw, weights)) for rows, raw in fold_raw]

    if audit:
        audit("model_fit", train)
    models = _fit_models(train, cfg, key)
    out.test_scores = _with_ensembles(_raw_scores(models, test.x), weights)

    imp = cfg.importance
    if imp is not None and Scenario.parse(imp.get("scenario", "2visits")) is scenario and imp.get(
        "penalty", "elasticnet"
    ) == penalty:
        out.importance = {}
        for agg in AGGREGATES:

            def scorer(x, agg=agg):
                return _with_ensembles(_raw_scores(models, x), weights)[agg]

            rep = permutation_importance(
                scorer, test, repeats=int(imp.get("repeats", 5)), seed=derive_seed(cfg.seed, "importance", *key, agg)
            )
            out.importance[agg] = {k: list(v) for k, v in rep.importance.items()}
    return out


def _run_imputation(args) -> list[_CellOutput]:
    design, train_idx, test_idx, fold_labels, m, cfg, audit = args
    outputs = []
    for scenario in cfg.scenarios:
        for penalty in cfg.penalties:
            try:
                outputs.append(_run_cell(design, train_idx, test_idx, fold_labels, scenario, penalty, m, cfg, audit))
            except (SurvensError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                log.warning("cell m%d/%s/%s failed: %s", m, scenario.value, penalty, exc)
                outputs.append(_CellOutput(scenario.value, penalty, error=f"{type(exc).__name__}: {exc}"))
    return outputs


# ---------------------------------------------------------------- metrics


def _metrics(scores, time, event) -> tuple[float, float, int]:
    """(C-index, iAUC, comparable pairs); NaN where undefined."""
    credit, pairs = concordance_counts(scores, time, event)
    c = credit / pairs if pairs else float("nan")
    try:
        iauc = auc_curve(scores, time, event).iauc if np.asarray(event).any() else float("nan")
    except SurvensError:
        iauc = float("nan")
    return c, iauc, int(pairs)


def _within_var(values: list[float]) -> float:
    """Variance of the fold mean: var(fold metrics) / K over defined folds."""
    v = np.asarray([x for x in values if np.isfinite(x)])
    if v.size < 2:
        return 0.0
    return float(v.var(ddof=1) / v.size)


def _imputation_estimates(out: _CellOutput, label: str, rows, time_tr, event_tr, time_te, event_te, test_rows=None):
    """Per-imputation (theta, var) for each metric, optionally restricted to subgroup rows."""
    scores = out.test_scores[label]
    sel = slice(None) if test_rows is None else test_rows
    c, iauc, pairs = _metrics(scores[sel], time_te[sel], event_te[sel])
    fold_c, fold_a = [], []
    for val_rows, fold in out.fold_scores:
        keep = np.ones(val_rows.size, bool) if rows is None else np.isin(val_rows, rows)
        if not keep.any():
            continue
        fc, fa, _ = _metrics(fold[label][keep], time_tr[val_rows[keep]], event_tr[val_rows[keep]])
        fold_c.append(fc)
        fold_a.append(fa)
    return {
        "cindex": c,
        "cindex_var": _within_var(fold_c),
        "iauc": iauc,
        "iauc_var": _within_var(fold_a),
        "pairs": pairs,
    }


def _pool_metric(per_imp: list[dict], metric: str, level: float) -> PooledEstimate | None:
    est = [(d[metric], d[f"{metric}_var"]) for d in per_imp]
    if any(not np.isfinite(t) for t, _ in est):
        return None
    return pool(est, level)


# ---------------------------------------------------------------- report


@dataclass
class CellReport:
    scenario: str
    penalty: str
    model: str
    agg: str
    cindex: PooledEstimate | None
    iauc: PooledEstimate | None
    per_imputation: list[dict] = field(default_factory=list)
    error: str | None = None
    bin: str | None = None

    @property
    def label(self) -> str:
        return _label(self.model, self.agg)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "penalty": self.penalty,
            "model": self.model,
            "agg": self.agg,
            "bin": self.bin,
            "cindex": None if self.cindex is None else self.cindex.to_json(),
            "iauc": None if self.iauc is None else self.iauc.to_json(),
            "per_imputation": self.per_imputation,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CellReport":
        return cls(
            d["scenario"],
            d["penalty"],
            d["model"],
            d["agg"],
            None if d["cindex"] is None else PooledEstimate.from_json(d["cindex"]),
            None if d["iauc"] is None else PooledEstimate.from_json(d["iauc"]),
            list(d["per_imputation"]),
            d["error"],
            d.get("bin"),
        )


@dataclass
class RunReport:
    cells: list[CellReport]
    selection: list[dict]
    bma_weights: list[dict]
    importance: dict | None
    subgroups: dict | None
    provenance: dict

    def cell(self, scenario, penalty, label, bin=None) -> CellReport:
        scenario = Scenario.parse(scenario).value
        for c in self.subgroup_cells() if bin is not None else self.cells:
            if c.scenario == scenario and c.penalty == penalty and c.label == label and c.bin == bin:
                return c
        raise KeyError((scenario, penalty, label, bin))

    def subgroup_cells(self) -> list[CellReport]:
        if not self.subgroups:
            return []
        return [CellReport.from_json(c) for c in self.subgroups["cells"]]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "cells": [c.to_json() for c in self.cells],
            "selection": self.selection,
            "bma_weights": self.bma_weights,
            "importance": self.importance,
            "subgroups": self.subgroups,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunReport":
        if d.get("version") != 1:
            raise ValidationError("unsupported report version")
        return cls(
            [CellReport.from_json(c) for c in d["cells"]],
            d["selection"],
            d["bma_weights"],
            d["importance"],
            d["subgroups"],
            d["provenance"],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, allow_nan=True)

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_csv(self, subgroup: bool = False) -> str:
        """Long table: one row per scenario x penalty x model (x bin)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cells = self.subgroup_cells() if subgroup else self.cells
        w.writerow(("bin", *CSV_HEADER) if subgroup else CSV_HEADER)
        for c in cells:
            row = [Scenario.parse(c.scenario).name, PENALTY_LABEL[c.penalty], c.model, c.agg]
            for est in (c.cindex, c.iauc):
                row += ["", "", ""] if est is None else [f"{est.mean:.6f}", f"{est.ci_low:.6f}", f"{est.ci_high:.6f}"]
            w.writerow([c.bin, *row] if subgroup else row)
        return buf.getvalue()

    def to_wide_csv(self, metric: str = "cindex") -> str:
        """Scenario x penalty rows, one column per model: ``mean [lo, hi]``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("scenario", "penalty", *COLUMNS))
        keys = []
        for c in self.cells:
            if (c.scenario, c.penalty) not in keys:
                keys.append((c.scenario, c.penalty))
        for scenario, penalty in keys:
            row = [Scenario.parse(scenario).name, PENALTY_LABEL[penalty]]
            for label in COLUMNS:
                est = getattr(self.cell(scenario, penalty, label), metric)
                row.append("" if est is None else f"{est.mean:.3f} [{est.ci_low:.3f}, {est.ci_high:.3f}]")
            w.writerow(row)
        return buf.getvalue()

    def importance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("agg", "feature", "importance_mean", "importance_sd"))
        for agg, table in (self.importance or {}).get("pooled", {}).items():
            for name, (mean, sd) in sorted(table.items(), key=lambda kv: -kv[1][0]):
                w.writerow((agg, name, f"{mean:.6f}", f"{sd:.6f}"))
        return buf.getvalue()


def _bin_labels(values: np.ndarray, edges) -> tuple[np.ndarray, list[str]]:
    """Bin index per value (-1 outside); bins are [e_i, e_{i+1}) with the last closed."""
    edges = np.asarray(edges, float)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValidationError("bin edges must increase strictly")
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = edges.size - 2
    idx[~np.isfinite(values) | (idx < 0) | (idx >= edges.size - 1)] = -1
    names = [f"{edges[i]:g}-{edges[i + 1]:g}" for i in range(edges.size - 1)]
    return idx, names


def subject_column(cohort: CohortTable, column: str) -> np.ndarray:
    """First observed value of a covariate per subject (NaN when never observed)."""
    if column not in cohort.covariate_names:
        raise ValidationError(f"unknown subgroup column {column!r}")
    j = cohort.covariate_names.index(column)
    out = np.full(len(cohort), np.nan)
    for i, s in enumerate(cohort.subjects):
        seen = s.values[:, j][np.isfinite(s.values[:, j])]
        if seen.size:
            out[i] = seen[0]
    return out


def subgroup_eval(outputs, values, edges, train_idx, test_idx, time, event, level=0.95) -> dict:
    """Recompute pooled metrics on test subjects inside each bin.

    ``outputs`` holds the per-imputation cell outputs of the globally trained
    models; ``values`` the grouping variable for every subject. Subjects
    outside all bins are dropped and counted. A bin without test subjects or
    without comparable pairs raises :class:`EmptyBin` internally and is
    reported as a skipped cell.
    """
    bins, names = _bin_labels(np.asarray(values, float), edges)
    time_tr, event_tr = time[train_idx], event[train_idx]
    time_te, event_te = time[test_idx], event[test_idx]
    bin_tr, bin_te = bins[train_idx], bins[test_idx]
    dropped = int(np.sum(bins < 0))
    if dropped:
        log.info("subgroup: %d subjects fall outside all bins", dropped)
    cells = []
    for b, name in enumerate(names):
        test_rows = np.flatnonzero(bin_te == b)
        train_rows = np.flatnonzero(bin_tr == b)
        for (scenario, penalty), per_m in outputs.items():
            for label in COLUMNS:
                model, agg = (label, "none") if label in BASE_MODELS else ("Ensemble", label)
                cell = CellReport(scenario, penalty, model, agg, None, None, bin=name)
                try:
                    if any(o.error for o in per_m):
                        raise SurvensError("; ".join(o.error for o in per_m if o.error))
                    if test_rows.size == 0:
                        raise EmptyBin(f"bin {name} has no test subjects")
                    per_imp = [
                        _imputation_estimates(o, label, train_rows, time_tr, event_tr, time_te, event_te, test_rows)
                        for o in per_m
                    ]
                    if per_imp[0]["pairs"] == 0:
                        raise EmptyBin(f"bin {name} has no comparable pairs")
                    cell.per_imputation = per_imp
                    cell.cindex = _pool_metric(per_imp, "cindex", level)
                    cell.iauc = _pool_metric(per_imp, "iauc", level)
                except SurvensError as exc:
                    cell.error = f"{type(exc).__name__}: {exc}"
                cells.append(cell.to_json())
    return {
        "bins": names,
        "edges": [float(e) for e in edges],
        "dropped": dropped,
        "n_test": {n: int(np.sum(bin_te == b)) for b, n in enumerate(names)},
        "cells": cells,
    }


def _pooled_importance(per_m: list[_CellOutput], order: list[str]) -> dict | None:
    """Mean importance across imputations; a feature not selected in an imputation counts as 0."""
    tables = [o.importance for o in per_m if o.importance]
    if not tables:
        return None
    pooled = {}
    for agg in AGGREGATES:
        names = [n for n in order if any(n in t[agg] for t in tables)]
        pooled[agg] = {
            n: [
                float(np.mean([t[agg].get(n, (0.0, 0.0))[0] for t in tables])),
                float(np.mean([t[agg].get(n, (0.0, 0.0))[1] for t in tables])),
            ]
            for n in names
        }
    return pooled


def _versions() -> dict:
    import numba
    import scipy

    return {
        "survens": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def impute_design(cohort: CohortTable, cfg: RunConfig) -> tuple[SurvivalDataset, list[np.ndarray]]:
    """The widest design and its M completions (outcomes are not used)."""
    design = build_design(truncate_visits(cohort, cfg.max_visits), Scenario.ThreeVisits)
    imps = mice(design.x, cfg.m_imputations, cfg.mice_iterations, derive_seed(cfg.seed, "mice"))
    return design, imps.datasets


def run(cfg: RunConfig, cohort: CohortTable, audit: AuditHook | None = None) -> RunReport:
    """Execute the full grid of cells and pool across imputations.

    ``audit`` (optional) is called as ``audit(stage, dataset)`` with every
    dataset that enters a fitting step; stages are ``standardizer``,
    ``coxnet_cv``, ``feature_selection``, ``bma_weights`` and ``model_fit``.
    """
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    cfg.validate()
    design, completed = impute_design(cohort, cfg)
    train_idx, test_idx = split_train_test(design.event, cfg.test_fraction, derive_seed(cfg.seed, "split"))
    fold_labels = stratified_folds(design.event[train_idx], cfg.cv_folds, derive_seed(cfg.seed, "folds"))
    log.info("split: %d train, %d test; %d imputations", train_idx.size, test_idx.size, len(completed))

    tasks = [
        (design.with_x(x), train_idx, test_idx, fold_labels, m, cfg, audit) for m, x in enumerate(completed)
    ]
    jobs = cfg.jobs or 1
    if jobs > 1 and audit is None and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool_:
            results = list(pool_.map(_run_imputation, tasks))
    else:
        results = [_run_imputation(t) for t in tasks]

    outputs: dict[tuple[str, str], list[_CellOutput]] = {}
    for per_m in results:
        for o in per_m:
            outputs.setdefault((o.scenario, o.penalty), []).append(o)

    time_tr, event_tr = design.time[train_idx], design.event[train_idx]
    time_te, event_te = design.time[test_idx], design.event[test_idx]
    cells, selection, weights = [], [], []
    importance = None
    for (scenario, penalty), per_m in outputs.items():
        errors = [o.error for o in per_m if o.error]
        for label in COLUMNS:
            model, agg = (label, "none") if label in BASE_MODELS else ("Ensemble", label)
            cell = CellReport(scenario, penalty, model, agg, None, None)
            if errors:
                cell.error = "; ".join(sorted(set(errors)))
            else:
                per_imp = [_imputation_estimates(o, label, None, time_tr, event_tr, time_te, event_te) for o in per_m]
                cell.per_imputation = per_imp
                cell.cindex = _pool_metric(per_imp, "cindex", cfg.level)
                cell.iauc = _pool_metric(per_imp, "iauc", cfg.level)
            cells.append(cell)
        ok = [o for o in per_m if not o.error]
        union = [n for n in design.feature_names if any(n in o.selected for o in ok)]
        selection.append(
            {
                "scenario": scenario,
                "penalty": penalty,
                "counts": [len(o.selected) for o in ok],
                "mean_count": float(np.mean([len(o.selected) for o in ok])) if ok else float("nan"),
                "fallback": [o.fallback for o in ok],
                "union": union,
                "per_imputation": [o.selected for o in ok],
            }
        )
        weights.append({"scenario": scenario, "penalty": penalty, "models": list(BASE_MODELS), "per_imputation": [o.weights for o in ok]})
        pooled_imp = _pooled_importance(ok, list(design.feature_names))
        if pooled_imp is not None:
            importance = {"scenario": scenario, "penalty": penalty, "metric": "Cindex", "pooled": pooled_imp}

    subgroups = None
    if cfg.subgroup is not None:
        values = subject_column(cohort, cfg.subgroup["column"])
        subgroups = subgroup_eval(
            outputs, values, cfg.subgroup["bins"], train_idx, test_idx, design.time, design.event, cfg.level
        )
        subgroups["column"] = cfg.subgroup["column"]

    provenance = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "n_subjects": len(cohort),
        "n_train": int(train_idx.size),
        "n_test": int(test_idx.size),
        "test_ids": [design.ids[i] for i in test_idx],
        "versions": _versions(),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    return RunReport(cells, selection, weights, importance, subgroups, provenance)

