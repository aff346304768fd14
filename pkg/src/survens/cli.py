"""``survens`` command line.

Subcommands share one YAML config (``--config``) plus ``--set key=value``
overrides. Exit codes: 0 success, 1 validation error (bad config key, bad
input file, bad arguments), 2 runtime failure. Every command writes
``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .coxnet import CoxnetFit, fit_coxnet, lambda_grid, top_k_features
from .dataset import CohortTable, load_cohort, load_dataset, save_cohort, save_dataset
from .deepsurv import DeepSurvModel, MlpConfig, fit_deepsurv
from .errors import SurvensError, ValidationError
from .features import FeatureSpec, Scenario, apply_standardizer, fit_standardizer, scenario_columns
from .gbcox import GbcoxModel, fit_gbcox
from .ensemble import RiskScores, aggregate_bma, aggregate_ea, compute_bma_weights, normalize
from .metrics import auc_curve, c_index, permutation_importance
from .pipeline import CSV_VERSION, RunReport, _versions, derive_seed, impute_design, run
from .rsf import RsfModel, fit_rsf
from .synth import GroundTruth, generate

log = logging.getLogger("survens")

MODEL_KINDS = {"rsf": RsfModel, "deepsurv": DeepSurvModel, "gbcox": GbcoxModel}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def demo_config_path() -> Path:
    return Path(str(resources.files("survens") / "data" / "demo.yaml"))


def _config(args) -> RunConfig:
    path = args.config or demo_config_path()
    cfg = load_config(path, args.set or ())
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    return cfg


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None


def _manifest(out: Path, args, outputs: list[str], cfg: RunConfig | None = None) -> None:
    _write_json(
        out / "manifest.json",
        {
            "command": args.command,
            "argv": getattr(args, "argv", []),
            "config_hash": None if cfg is None else cfg.config_hash(),
            "seed": None if cfg is None else cfg.seed,
            "config": None if cfg is None else cfg.raw,
            "csv_version": CSV_VERSION,
            "versions": _versions(),
            "outputs": outputs,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        },
    )


def _cohort(cfg: RunConfig, path=None) -> CohortTable:
    path = path or cfg.data_path
    if path is not None:
        return load_cohort(path, cfg.schema)
    return generate(cfg.synth)[0]


def _load_model(path):
    d = _read_json(path)
    kind = d.get("kind")
    if kind not in MODEL_KINDS:
        raise ValidationError(f"{path}: unknown model kind {kind!r}")
    return MODEL_KINDS[kind].from_json(d)


def _prepare(ds, spec_path=None, selection_path=None):
    """Apply a saved standardizer and/or feature selection to a dataset."""
    if spec_path:
        ds = apply_standardizer(FeatureSpec.from_json(_read_json(spec_path)), ds)
    if selection_path:
        fit = CoxnetFit.from_json(_read_json(selection_path))
        names = fit.selected_names or top_k_features(fit)
        ds = ds.columns(names)
    return ds


# ---------------------------------------------------------------- commands


def _csv_target(out: str, default: str) -> tuple[Path, Path]:
    """(directory, file) for an ``--out`` that is either a directory or a .csv path."""
    target = Path(out)
    if target.suffix.lower() == ".csv":
        return target.parent, target
    return target, target / default


def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.synth is None:
        raise ValidationError("generate needs a synth block in the config")
    out, csv_path = _csv_target(args.out, "cohort.csv")
    out.mkdir(parents=True, exist_ok=True)
    truth_path = csv_path.with_suffix(".truth.json")
    cohort, truth = generate(cfg.synth)
    save_cohort(cohort, csv_path, cfg.schema)
    truth.save(truth_path)
    _manifest(out, args, [csv_path.name, truth_path.name], cfg)
    print(f"wrote {len(cohort)} subjects to {csv_path}")
    return 0


def cmd_impute(args) -> int:
    cfg = _config(args)
    if args.m is not None:
        cfg.m_imputations = args.m
    if args.iters is not None:
        cfg.mice_iterations = args.iters
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = _cohort(cfg, args.cohort)
    design, completed = impute_design(cohort, cfg)
    save_dataset(design, out / "design.csv")
    names = ["design.csv"]
    for m, x in enumerate(completed):
        name = f"imputed_{m:02d}.csv"
        save_dataset(design.with_x(x), out / name)
        names.append(name)
    _manifest(out, args, names, cfg)
    print(f"wrote {len(completed)} imputations of {design.p} features to {out}")
    return 0


def cmd_select(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(args.data)
    scenario = Scenario.parse(args.scenario)
    ds = ds.columns(scenario_columns(ds.feature_names, scenario))
    spec = fit_standardizer(ds)
    z = apply_standardizer(spec, ds)
    alpha = cfg.alpha(args.penalty) if args.alpha is None else args.alpha
    if not 0 <= alpha <= 1:
        raise ValidationError("--alpha must lie in [0, 1]")
    folds = cfg.cv_folds if args.folds is None else args.folds
    lambdas = lambda_grid(z, alpha, int(cfg.coxnet["n_lambda"]), float(cfg.coxnet["lambda_min_ratio"]))
    fit = fit_coxnet(z, alpha, lambdas, folds, seed=derive_seed(cfg.seed, "select", scenario.value, alpha))
    _write_json(out / "standardizer.json", spec.to_json())
    _write_json(out / "coxnet.json", fit.to_json())
    _write_json(out / "selected.json", {"alpha": alpha, "lambda": fit.lambda_, "selected": fit.selected_names})
    _manifest(out, args, ["standardizer.json", "coxnet.json", "selected.json"], cfg)
    print(f"selected {len(fit.selected_names)} of {z.p} features at lambda={fit.lambda_:.4g}")
    for name in fit.selected_names:
        print(f"  {name}")
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _prepare(load_dataset(args.data), args.standardizer, args.selection)
    if args.model == "rsf":
        r = cfg.rsf
        model = fit_rsf(ds, int(r["b"]), r["mtry"], int(r["min_node_events"]), derive_seed(cfg.seed, "rsf"), True, r["max_depth"])
    elif args.model == "deepsurv":
        model = fit_deepsurv(ds, MlpConfig(**cfg.deepsurv, weight_init_seed=derive_seed(cfg.seed, "deepsurv") % 2**32))
    else:
        model = fit_gbcox(ds, **cfg.gbcox, seed=derive_seed(cfg.seed, "gbcox"))
    name = f"{args.model}.json"
    model.save(out / name)
    _manifest(out, args, [name], cfg)
    print(f"wrote {out / name}")
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = [_load_model(p) for p in args.model]
    ds = _prepare(load_dataset(args.data), args.standardizer, None)
    if len(models) > 1 or args.agg:
        agg = args.agg or "ea"
        weights = None
        if agg == "bma":
            if not args.weights_data:
                raise ValidationError("--agg bma needs --weights-data (a validation CSV)")
            val = _prepare(load_dataset(args.weights_data), args.standardizer, None)
            raw = [RiskScores(str(k), m.risk_score(val.columns(m.feature_names).x)) for k, m in enumerate(models)]
            weights = compute_bma_weights(raw, val.time, val.event)

        def scorer(x, names=list(ds.feature_names)):
            frame = ds.with_x(x, names)
            z = [normalize(RiskScores(str(k), m.risk_score(frame.columns(m.feature_names).x))) for k, m in enumerate(models)]
            return (aggregate_ea(z) if weights is None else aggregate_bma(z, weights)).scores

    else:
        model = models[0]
        ds = ds.columns(model.feature_names)

        def scorer(x):
            return model.risk_score(x)

    scores = scorer(ds.x)
    curve = auc_curve(scores, ds.time, ds.event)
    result = {"n": ds.n, "events": int(ds.event.sum()), "cindex": c_index(scores, ds.time, ds.event), "iauc": curve.iauc}
    result["auc_curve"] = curve.to_json()
    if len(models) > 1 or args.agg:
        result["agg"] = args.agg or "ea"
        result["weights"] = None if weights is None else weights.weights.tolist()
    if args.truth:
        truth = GroundTruth.from_json(_read_json(args.truth))
        where = {sid: i for i, sid in enumerate(truth.ids)}
        eta = np.array([truth.eta[where[sid]] for sid in ds.ids])
        result["oracle_cindex"] = c_index(eta, ds.time, ds.event)
    _write_json(out / "metrics.json", result)
    names = ["metrics.json"]
    if args.importance_repeats > 0:
        rep = permutation_importance(scorer, ds, args.importance_repeats, seed=args.seed)
        rep.to_csv(out / "importance.csv")
        names.append("importance.csv")
    _manifest(out, args, names)
    print(f"C-index {result['cindex']:.4f}  iAUC {result['iauc']:.4f}")
    return 0


def _write_report(report: RunReport, out: Path) -> list[str]:
    files = {
        "report.csv": report.to_csv(),
        "table_cindex.csv": report.to_wide_csv("cindex"),
        "table_iauc.csv": report.to_wide_csv("iauc"),
    }
    if report.subgroups:
        files["subgroups.csv"] = report.to_csv(subgroup=True)
    if report.importance:
        files["importance.csv"] = report.importance_csv()
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    return list(files)


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.scenario:
        cfg.scenarios = [Scenario.parse(s) for s in args.scenario]
    if cfg.jobs is None:
        cfg.jobs = os.cpu_count() or 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run(cfg, _cohort(cfg, args.cohort))
    report.save(out / "report.json")
    names = ["report.json", *_write_report(report, out)]
    _manifest(out, args, names, cfg)
    failed = [c for c in report.cells if c.error]
    print(report.to_wide_csv("cindex"), end="")
    if failed:
        print(f"{len(failed)} cells failed; see report.json", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport.from_json(_read_json(args.report))
    names = _write_report(report, out)
    _manifest(out, args, names)
    print(report.to_wide_csv(args.metric), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="survens", description="Longitudinal survival ensembles with multiple imputation.")
    parser.add_argument("--version", action="version", version=f"survens {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run config (default: the shipped demo)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. run.seed=3")
        p.add_argument("--out", "--out-dir", dest="out", default=".", help="output directory")

    p = sub.add_parser("generate", help="simulate a synthetic cohort from the synth block")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("impute", help="build the 3-visit design and write M MICE completions")
    common(p)
    p.add_argument("--cohort", "--in", dest="cohort", help="long-format cohort CSV (default: data.path or synth)")
    p.add_argument("--m", type=int, help="number of imputations (run.m_imputations)")
    p.add_argument("--iters", type=int, help="chained-equation sweeps (run.mice_iterations)")
    p.add_argument("--seed", type=int, help="global seed (run.seed)")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("select", help="standardize and run cross-validated coxnet selection")
    common(p)
    p.add_argument("--data", required=True, help="complete wide dataset CSV")
    p.add_argument("--scenario", default="3visits", choices=[s.value for s in Scenario])
    p.add_argument("--penalty", default="elasticnet", choices=["lasso", "elasticnet"])
    p.add_argument("--alpha", type=float, help="mixing weight; 1.0 is the lasso (overrides --penalty)")
    p.add_argument("--folds", type=int, help="cross-validation folds for lambda (run.cv_folds)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fit", help="fit one learner")
    common(p)
    p.add_argument("--data", required=True, help="complete wide dataset CSV")
    p.add_argument("--model", required=True, choices=sorted(MODEL_KINDS))
    p.add_argument("--standardizer", help="standardizer.json from select")
    p.add_argument("--selection", help="coxnet.json from select")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="C-index and AUC curve of a saved model")
    common(p, config=False)
    p.add_argument("--model", required=True, action="append", help="model JSON from fit; repeat to aggregate")
    p.add_argument("--data", required=True, help="complete wide dataset CSV")
    p.add_argument("--standardizer", help="standardizer.json from select")
    p.add_argument("--agg", choices=["ea", "bma"], help="aggregate several models (default ea)")
    p.add_argument("--weights-data", help="validation CSV for BMA weights")
    p.add_argument("--importance-repeats", type=int, default=5, help="permutation repeats; 0 skips importance.csv")
    p.add_argument("--seed", type=int, default=0, help="seed for the importance permutations")
    p.add_argument("--truth", help="truth JSON from generate, adds the oracle C-index")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full experiment grid with Rubin pooling")
    common(p)
    p.add_argument("--cohort", help="long-format cohort CSV (default: data.path or synth)")
    p.add_argument("--jobs", type=int, help="worker processes (default: available cores)")
    p.add_argument("--scenario", action="append", choices=[s.value for s in Scenario], help="restrict run.scenarios; repeatable")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render CSV tables from report.json")
    common(p, config=False)
    p.add_argument("--report", required=True, help="report.json from run")
    p.add_argument("--metric", default="cindex", choices=["cindex", "iauc"])
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"survens {args.command}: {exc}", file=sys.stderr)
        return 1
    except (SurvensError, OSError, ArithmeticError) as exc:
        print(f"survens {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
