import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from survens.config import build_config  # noqa: E402
from survens.dataset import SurvivalDataset  # noqa: E402
from survens.synth import SynthConfig, generate  # noqa: E402


def ph_dataset(n, beta, seed, censor_rate=0.3, shape=1.5, scale=60.0):
    """Cross-sectional PH data with standard-normal covariates and known beta."""
    beta = np.asarray(beta, float)
    cfg = SynthConfig(
        n_subjects=n,
        n_numeric=beta.size,
        true_beta=beta.tolist(),
        slope_beta=[0.0] * beta.size,
        slope_sd=0.0,
        censor_rate=censor_rate,
        baseline_hazard_shape=shape,
        baseline_hazard_scale=scale,
        visit_times=[0.0],
        seed=seed,
    )
    cohort, truth = generate(cfg)
    x = np.array([s.baseline[: beta.size] for s in cohort.subjects])
    names = [f"x{j + 1}" for j in range(beta.size)]
    return SurvivalDataset(x, names, cohort.time, cohort.event, cohort.ids), truth


def small_run_config(**overrides):
    """A run config small enough for unit tests (seconds, not minutes)."""
    raw = {
        "synth": {
            "n_subjects": 160,
            "n_numeric": 3,
            "true_beta": [0.5, 0.0, 0.0],
            "slope_beta": [8.0, 0.0, 0.0],
            "slope_sd": 0.1,
            "censor_rate": 0.4,
            "missing_rate": 0.03,
            "seed": 1,
        },
        "run": {
            "scenarios": ["baseline", "2visits"],
            "penalties": ["lasso"],
            "m_imputations": 2,
            "mice_iterations": 3,
            "cv_folds": 3,
            "seed": 5,
        },
        "coxnet": {"n_lambda": 8},
        "rsf": {"b": 4},
        "deepsurv": {"layer_widths": [4], "epochs": 10, "learning_rate": 0.01},
        "gbcox": {"n_rounds": 5},
    }
    for key, value in overrides.items():
        block, _, leaf = key.partition(".")
        if leaf:
            raw.setdefault(block, {})[leaf] = value
        else:
            raw[block] = value
    return build_config(raw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary prints them all."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
