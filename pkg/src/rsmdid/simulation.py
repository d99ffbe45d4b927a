"""Monte Carlo power study for the split, tree, and submax pipeline.

Each replication draws matched sets whose exposed unit carries an effect
that depends on two binary covariates, grows a tree on the discovery split,
and tests the discovered leaves on the testing split. Power is the rate
of global rejections of the no-heterogeneity null.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .cart import TreeParams
from .discovery import SplitPlan, confirm_from_deltas, extract_groups, fit_cart_deltas, split_rows
from .errors import ConfigError
from .inference import DeltaSets
from .matching import MatchedDesign, MatchedSet, MatchSpec

log = logging.getLogger(__name__)

POWER_VERSION = "power/v1"
DEFAULT_SET_SIZE_PROBS = (0.025, 0.025, 0.05, 0.1, 0.8)

# effect means (tau00, tau01, tau10, tau11) indexed by (x1, x2); labels give the
# size of the x1 and x2 modification
SCENARIOS = {
    "Small, No": (0.4, 0.4, 0.6, 0.6),
    "Large, No": (0.3, 0.3, 0.7, 0.7),
    "Small, Small": (0.4, 0.4, 0.5, 0.7),
    "Large, Small": (0.3, 0.3, 0.6, 0.8),
    "Moderate, Moderate": (0.2, 0.5, 0.5, 0.8),
}
SPLITS = ((0.10, 0.90), (0.25, 0.75), (0.50, 0.50))


@dataclass(frozen=True)
class SimScenario:
    tau: tuple = (0.5, 0.5, 0.5, 0.5)
    label: str = ""
    n_treated: int = 2000
    set_size_probs: tuple = DEFAULT_SET_SIZE_PROBS
    n_covariates: int = 5
    split_ratio: tuple = (0.25, 0.75)
    replications: int = 1000
    alpha: float = 0.05
    alpha1: Optional[float] = None
    seed: int = 0
    n_draws: int = 100_000
    two_sided: bool = True
    tree: TreeParams = field(default_factory=TreeParams)

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))
        object.__setattr__(self, "set_size_probs", tuple(float(p) for p in self.set_size_probs))
        object.__setattr__(self, "split_ratio", tuple(float(p) for p in self.split_ratio))
        if len(self.tau) != 4:
            raise ConfigError("tau needs four cell means (x1, x2) = 00, 01, 10, 11")
        if abs(sum(self.set_size_probs) - 1.0) > 1e-9 or min(self.set_size_probs) < 0:
            raise ConfigError("set-size probabilities must be nonnegative and sum to 1")
        if self.replications < 1 or self.n_treated < 2:
            raise ConfigError("need replications >= 1 and n_treated >= 2")
        if self.n_covariates < 2:
            raise ConfigError("need at least the two modifying covariates")
        if abs(sum(self.split_ratio) - 1.0) > 1e-9:
            raise ConfigError("split ratio must sum to 1")


@dataclass
class SimInstance:
    deltas: DeltaSets
    features: pd.DataFrame
    effects: np.ndarray

    @cached_property
    def design(self) -> MatchedDesign:
        sets = []
        for i, n in enumerate(self.deltas.sizes):
            controls = tuple(f"C{i:06d}_{j}" for j in range(1, n))
            sets.append(MatchedSet(int(self.deltas.set_ids[i]), 1, f"T{i:06d}", controls))
        return MatchedDesign(tuple(sets), MatchSpec())


def simulate_instance(scn: SimScenario, rep_seed) -> SimInstance:
    """One synthetic study: set sizes, covariates, effects and first differences."""
    rng = np.random.default_rng(rep_seed)
    n = scn.n_treated
    k = len(scn.set_size_probs)
    controls = rng.choice(np.arange(1, k + 1), size=n, p=scn.set_size_probs)
    x = rng.integers(0, 2, size=(n, scn.n_covariates))
    cell = 2 * x[:, 0] + x[:, 1]
    effects = rng.normal(np.asarray(scn.tau)[cell], 1.0)
    deltas = rng.standard_normal((n, k + 1))
    deltas[:, 0] += effects
    deltas[np.arange(k + 1)[None, :] > controls[:, None]] = np.nan
    ds = DeltaSets(np.arange(n), deltas, controls + 1)
    features = pd.DataFrame(x, columns=[f"x{j + 1}" for j in range(scn.n_covariates)])
    return SimInstance(ds, features, effects)


@dataclass(frozen=True)
class ReplicationOutcome:
    global_reject: bool
    leaf_reject: bool
    n_leaves: int
    any_reject: bool = False  # some comparison, leaf or union, rejected by closed testing


def run_replication(scn: SimScenario, seq: np.random.SeedSequence) -> ReplicationOutcome:
    data_seed, split_seed, mc_seed = seq.spawn(3)
    inst = simulate_instance(scn, data_seed)
    split_int = int(split_seed.generate_state(1, np.uint64)[0])
    disc, test = split_rows(len(inst.deltas), SplitPlan(scn.split_ratio[0], split_int))
    tree = fit_cart_deltas(inst.deltas.take(disc), inst.features.iloc[disc], scn.tree)
    sub = extract_groups(tree)
    labels = sub.labels_for(inst.features.iloc[test])
    res = confirm_from_deltas(
        inst.deltas.take(test),
        labels,
        sub.cmat,
        scn.alpha,
        scn.alpha1,
        leaf_summaries=False,
        two_sided=scn.two_sided,
        report=False,
        n_draws=scn.n_draws,
        seed=int(mc_seed.generate_state(1, np.uint64)[0]),
    )
    leaf_rows = [k for k in range(res.cmat.K) if res.cmat.c[k].sum() == 1]
    leaf_reject = any(res.per_comparison[k].rejected for k in leaf_rows)
    any_reject = any(c.rejected for c in res.per_comparison)
    return ReplicationOutcome(res.global_reject, leaf_reject, len(sub.leaf_ids), any_reject)


def replication_seed(master: int, cell: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=(int(cell), int(rep)))


def _run_block(args):
    scn, cell, reps = args
    return [asdict(run_replication(scn, replication_seed(scn.seed, cell, r))) for r in reps]


@dataclass(frozen=True)
class PowerRow:
    label: str
    tau: tuple
    split: tuple
    rate: float
    se: float
    replications: int
    leaf_rate: float
    mean_leaves: float


@dataclass
class PowerReport:
    rows: list

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "scenario": r.label,
                    "tau": "(" + ",".join(f"{t:g}" for t in r.tau) + ")",
                    "split": f"{round(100 * r.split[0])}/{round(100 * r.split[1])}",
                    "power": r.rate,
                    "mc_se": r.se,
                    "replications": r.replications,
                    "leaf_power": r.leaf_rate,
                    "mean_leaves": r.mean_leaves,
                }
                for r in self.rows
            ]
        )

    def table(self) -> pd.DataFrame:
        """Scenarios as rows and split ratios as columns."""
        f = self.to_frame()
        return f.pivot_table(index=["scenario", "tau"], columns="split", values="power", sort=False)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_dict(self) -> dict:
        return {"version": POWER_VERSION, "rows": [asdict(r) for r in self.rows]}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def lookup(self, label: str, split) -> PowerRow:
        for r in self.rows:
            if r.label == label and np.allclose(r.split, split):
                return r
        raise KeyError((label, split))


def _summarize(scn: SimScenario, outcomes: list) -> PowerRow:
    n = len(outcomes)
    rate = sum(o["global_reject"] for o in outcomes) / n
    return PowerRow(
        scn.label,
        scn.tau,
        scn.split_ratio,
        rate,
        math.sqrt(rate * (1.0 - rate) / n),
        n,
        sum(o["leaf_reject"] for o in outcomes) / n,
        float(np.mean([o["n_leaves"] for o in outcomes])),
    )


def scenario_grid(base: SimScenario = SimScenario(), scenarios: Optional[dict] = None, splits=SPLITS) -> list:
    scenarios = SCENARIOS if scenarios is None else scenarios
    return [replace(base, label=lb, tau=tau, split_ratio=sp) for lb, tau in scenarios.items() for sp in splits]


def _cell_key(scn: SimScenario) -> str:
    return json.dumps([scn.label, scn.tau, scn.split_ratio, scn.replications, scn.seed, scn.n_treated])


def run_power_study(
    grid: Sequence[SimScenario], threads: int = 1, checkpoint: Optional[str] = None, chunk: int = 25
) -> PowerReport:
    """Power of the global test for each scenario cell.

    Replication ``r`` of the scenario at position ``i`` uses a seed derived
    from ``(seed, i, r)``, so results do not depend on scheduling. Cells with
    the same position share their simulated data across split ratios when
    the grid lists split ratios within a scenario. With ``checkpoint``,
    finished cells are appended to that file and skipped on rerun.
    """
    done = {}
    if checkpoint and os.path.exists(checkpoint):
        with open(checkpoint) as fh:
            for line in fh:
                rec = json.loads(line)
                done[rec["key"]] = rec["outcomes"]
    labels = []
    for scn in grid:
        if scn.label not in labels:
            labels.append(scn.label)
    rows = []
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for scn in grid:
            key = _cell_key(scn)
            if key not in done:
                cell = labels.index(scn.label)
                blocks = [
                    (scn, cell, range(s, min(s + chunk, scn.replications))) for s in range(0, scn.replications, chunk)
                ]
                results = pool.map(_run_block, blocks) if pool else map(_run_block, blocks)
                outcomes = [o for block in results for o in block]
                done[key] = outcomes
                if checkpoint:
                    with open(checkpoint, "a") as fh:
                        fh.write(json.dumps({"key": key, "outcomes": outcomes}) + "\n")
                log.info("%s %s: power %.3f", scn.label, scn.split_ratio, _summarize(scn, outcomes).rate)
            rows.append(_summarize(scn, done[key]))
    finally:
        if pool:
            pool.shutdown()
    return PowerReport(rows)
