import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rsmdid.inference import DeltaSets
from rsmdid.matching import MatchSpec, run_risk_set_matching
from rsmdid.panel_data import HazardSpec, PanelDataset, SynthConfig, synth_generate


def make_panel(continuous=None, categorical=None, exposure=None, T=3, outcomes=None):
    """Small panel whose covariates are constant over time; unit ids are u0, u1, ..."""
    continuous = continuous or {}
    categorical = categorical or {}
    n = len(exposure)
    ids = tuple(f"u{i}" for i in range(n))
    cont = {k: np.repeat(np.asarray(v, dtype=float)[:, None], T, axis=1) for k, v in continuous.items()}
    cat = {k: np.repeat(np.asarray(v, dtype=object)[:, None], T, axis=1) for k, v in categorical.items()}
    if outcomes is None:
        outcomes = {"y": np.zeros((n, T))}
    exp = np.array([np.inf if z is None else float(z) for z in exposure])
    return PanelDataset(ids, np.arange(1, T + 1), exp, outcomes, cont, cat)


def random_deltas(rng, n_sets, max_size=6, shift=0.0):
    sizes = rng.integers(2, max_size + 1, n_sets)
    diffs = []
    for n in sizes:
        x = rng.standard_normal(n)
        x[0] += shift
        diffs.append(x)
    return DeltaSets.from_list(np.arange(n_sets), diffs)


NULL_CONFIG = SynthConfig(n_units=1200, t_max=24, hazard=HazardSpec(intercept=-4.5), seed=3)
NULL_SPEC = MatchSpec(("sex", "plan"), (("age", 3.0), ("risk_score", 0.3)))


@pytest.fixture(scope="session")
def null_panel():
    return synth_generate(NULL_CONFIG)


@pytest.fixture(scope="session")
def null_design(null_panel):
    return run_risk_set_matching(null_panel, NULL_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
