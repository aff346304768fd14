"""Run configuration: a YAML file of nested blocks, validated strictly.

Unknown keys are errors. ``key.sub=value`` overrides are applied after the
file is parsed; values are read as YAML scalars (so ``3``, ``0.5``, ``true``,
``[1, 2]`` and ``null`` all work).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import Schema
from .deepsurv import MlpConfig
from .errors import ValidationError
from .features import Scenario
from .synth import SynthConfig

DEFAULTS: dict = {
    "data": {"path": None, "schema": None},
    "synth": None,
    "run": {
        "scenarios": ["baseline", "2visits", "3visits"],
        "penalties": ["lasso", "elasticnet"],
        "m_imputations": 20,
        "mice_iterations": 50,
        "cv_folds": 5,
        "test_fraction": 0.2,
        "seed": 0,
        "level": 0.95,
        "top_k": 10,
        "max_visits": 3,
        "jobs": None,
    },
    "subgroup": None,
    "importance": None,
    "coxnet": {"elasticnet_alpha": 0.5, "n_lambda": 100, "lambda_min_ratio": 1e-3},
    "rsf": {"b": 500, "mtry": None, "min_node_events": 3, "max_depth": None},
    "deepsurv": {
        "layer_widths": [32, 32],
        "activation": "relu",
        "dropout": 0.1,
        "optimizer": "adam",
        "learning_rate": 1e-3,
        "epochs": 500,
    },
    "gbcox": {"n_rounds": 200, "learning_rate": 0.1, "max_depth": 3, "gamma": 0.0, "lambda_l2": 1.0},
}

_SUBGROUP_KEYS = {"column", "bins"}
_IMPORTANCE_KEYS = {"scenario", "penalty", "repeats"}
PENALTIES = ("lasso", "elasticnet")


def _merge(base: dict, update: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ValidationError(f"unknown config key: {where}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _check_block(block, keys, where):
    if block is None:
        return
    if not isinstance(block, dict):
        raise ValidationError(f"{where} must be a mapping")
    unknown = set(block) - keys
    if unknown:
        raise ValidationError(f"unknown config key: {where}.{sorted(unknown)[0]}")


def apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} must look like key.sub=value")
    key, text = assignment.split("=", 1)
    value = yaml.safe_load(text)
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValidationError(f"cannot override inside non-mapping key {key!r}")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    scenarios: list[Scenario]
    penalties: list[str]
    m_imputations: int = 20
    mice_iterations: int = 50
    cv_folds: int = 5
    test_fraction: float = 0.2
    seed: int = 0
    level: float = 0.95
    top_k: int = 10
    max_visits: int = 3
    jobs: int | None = None
    subgroup: dict | None = None
    importance: dict | None = None
    coxnet: dict = field(default_factory=dict)
    rsf: dict = field(default_factory=dict)
    deepsurv: dict = field(default_factory=dict)
    gbcox: dict = field(default_factory=dict)
    data_path: str | None = None
    schema: Schema | None = None
    synth: SynthConfig | None = None
    raw: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not 0 < self.test_fraction < 1:
            raise ValidationError("run.test_fraction must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ValidationError("run.cv_folds must be >= 2")
        if self.m_imputations < 2:
            raise ValidationError("run.m_imputations must be >= 2 for Rubin pooling")
        if self.mice_iterations < 0:
            raise ValidationError("run.mice_iterations must be >= 0")
        if not self.scenarios or not self.penalties:
            raise ValidationError("need at least one scenario and one penalty")
        for p in self.penalties:
            if p not in PENALTIES:
                raise ValidationError(f"unknown penalty {p!r}; expected one of {PENALTIES}")
        if self.subgroup is not None:
            bins = self.subgroup.get("bins")
            if not self.subgroup.get("column") or not bins or len(bins) < 2:
                raise ValidationError("subgroup needs a column and at least two bin edges")
            if any(b <= a for a, b in zip(bins, bins[1:])):
                raise ValidationError("subgroup bin edges must increase strictly")
        if self.importance is not None:
            Scenario.parse(self.importance.get("scenario", "2visits"))
            if self.importance.get("penalty", "elasticnet") not in PENALTIES:
                raise ValidationError("importance.penalty must be lasso or elasticnet")
        MlpConfig(**self.deepsurv)
        if self.data_path is None and self.synth is None:
            raise ValidationError("config needs data.path or a synth block")

    def alpha(self, penalty: str) -> float:
        return 1.0 if penalty == "lasso" else float(self.coxnet["elasticnet_alpha"])

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def build_config(raw: dict) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValidationError("config file must be a mapping")
    merged = _merge(DEFAULTS, raw, "")
    _check_block(merged["subgroup"], _SUBGROUP_KEYS, "subgroup")
    _check_block(merged["importance"], _IMPORTANCE_KEYS, "importance")
    run = merged["run"]
    synth = None
    if merged["synth"] is not None:
        synth = SynthConfig.from_dict(merged["synth"])
    schema = None
    if merged["data"]["schema"] is not None:
        schema = Schema.from_dict(merged["data"]["schema"])
    elif synth is not None:
        schema = synth.schema()
    cfg = RunConfig(
        scenarios=[Scenario.parse(s) for s in run["scenarios"]],
        penalties=[str(p).lower().replace("_", "").replace("-", "") for p in run["penalties"]],
        m_imputations=int(run["m_imputations"]),
        mice_iterations=int(run["mice_iterations"]),
        cv_folds=int(run["cv_folds"]),
        test_fraction=float(run["test_fraction"]),
        seed=int(run["seed"]),
        level=float(run["level"]),
        top_k=int(run["top_k"]),
        max_visits=int(run["max_visits"]),
        jobs=None if run["jobs"] is None else int(run["jobs"]),
        subgroup=merged["subgroup"],
        importance=merged["importance"],
        coxnet=merged["coxnet"],
        rsf=merged["rsf"],
        deepsurv=merged["deepsurv"],
        gbcox=merged["gbcox"],
        data_path=merged["data"]["path"],
        schema=schema,
        synth=synth,
        raw=merged,
    )
    cfg.validate()
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    cfg = build_config(raw)
    if cfg.data_path is not None and not Path(cfg.data_path).is_absolute():
        cfg.data_path = str((path.parent / cfg.data_path).resolve())
    return cfg
