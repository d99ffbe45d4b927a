"""Risk set matching with profile-matching calipers.

Each newly exposed unit is matched, at its exposure time, to the largest
subset of not-yet-exposed units (at most ``max_controls``) that agrees on
every exact covariate and whose covariate means lie within the calipers of
the exposed unit's own values. Controls are consumed: no unit ever appears
in two matched sets.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, UnknownCovariate
from .panel_data import NEVER, PanelDataset

log = logging.getLogger(__name__)

EXHAUSTIVE_POOL_LIMIT = 25
BEAM_WIDTH = 64
DESIGN_VERSION = "design/v1"


@dataclass(frozen=True)
class MatchSpec:
    exact_covariates: tuple = ()
    caliper_covariates: tuple = ()  # (name, delta) pairs
    max_controls: int = 5
    min_controls: int = 1

    def __post_init__(self):
        object.__setattr__(self, "exact_covariates", tuple(self.exact_covariates))
        object.__setattr__(self, "caliper_covariates", tuple((str(n), float(d)) for n, d in self.caliper_covariates))
        if any(d <= 0 for _, d in self.caliper_covariates):
            raise ConfigError("calipers must be strictly positive")
        if not 1 <= self.min_controls <= self.max_controls:
            raise ConfigError("need 1 <= min_controls <= max_controls")

    @property
    def caliper_names(self) -> list:
        return [n for n, _ in self.caliper_covariates]

    @property
    def deltas(self) -> np.ndarray:
        return np.array([d for _, d in self.caliper_covariates], dtype=float)


@dataclass(frozen=True)
class MatchedSet:
    set_id: int
    exposure_time: int
    treated_unit: str
    control_units: tuple

    @property
    def members(self) -> tuple:
        return (self.treated_unit,) + tuple(self.control_units)

    @property
    def n_controls(self) -> int:
        return len(self.control_units)


class Infeasible:
    """Returned by :func:`profile_match_one` when no admissible control set exists."""

    def __init__(self, treated, reason):
        self.treated = treated
        self.reason = reason

    def __repr__(self):
        return f"Infeasible({self.treated!r}, {self.reason!r})"

    def __bool__(self):
        return False


@dataclass
class MatchAudit:
    exposed: Counter = field(default_factory=Counter)
    matched: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    set_sizes: Counter = field(default_factory=Counter)
    infeasible: list = field(default_factory=list)  # (unit, time, reason)

    def to_dict(self) -> dict:
        times = sorted(set(self.exposed) | set(self.matched) | set(self.dropped))
        return {
            "per_time": [
                {"time": int(t), "exposed": self.exposed[t], "matched": self.matched[t], "dropped": self.dropped[t]}
                for t in times
            ],
            "set_size_histogram": {str(k): self.set_sizes[k] for k in sorted(self.set_sizes)},
            "infeasible": [{"unit_id": u, "time": int(t), "reason": r} for u, t, r in self.infeasible],
        }


@dataclass(frozen=True, eq=False)
class MatchedDesign:
    sets: tuple
    spec: MatchSpec
    audit: MatchAudit = field(default_factory=MatchAudit)

    def __len__(self):
        return len(self.sets)

    def subset(self, set_ids) -> "MatchedDesign":
        keep = set(set_ids)
        return MatchedDesign(tuple(s for s in self.sets if s.set_id in keep), self.spec, self.audit)

    @property
    def set_ids(self) -> list:
        return [s.set_id for s in self.sets]

    def by_id(self) -> dict:
        return {s.set_id: s for s in self.sets}


def matching_time(t: int) -> int:
    """Time whose covariate values are used when matching an exposure at ``t``."""
    return max(int(t) - 1, 1)


# ---------------------------------------------------------------------------
# risk sets


def build_risk_sets(d: PanelDataset) -> dict:
    """Map each exposure time to ``(exposed ids, not-yet-exposed ids)``."""
    z = np.asarray(d.exposure)
    out = {}
    for t in np.unique(z[np.isfinite(z)]):
        exposed = [d.unit_ids[i] for i in np.flatnonzero(z == t)]
        eligible = [d.unit_ids[i] for i in np.flatnonzero(z > t)]
        out[int(t)] = (exposed, eligible)
    return out


# ---------------------------------------------------------------------------
# profile matching for one exposed unit


def _select(ids, x, dist, x0, deltas, k, exhaustive):
    """Best feasible size-``k`` subset of the candidate rows, or None."""
    n = len(ids)
    if k > n:
        return None
    # the k nearest minimise total distance; if they are feasible they win outright
    near = np.lexsort((_ranks(ids), dist))[:k]
    if deltas.size == 0 or np.all(np.abs(x[near].mean(axis=0) - x0) <= deltas + 1e-12):
        return near
    if exhaustive:
        combos = np.array(list(itertools.combinations(range(n), k)), dtype=np.intp)
        means = x[combos].mean(axis=1)
        ok = np.all(np.abs(means - x0) <= deltas + 1e-12, axis=1)
        if not ok.any():
            return None
        combos = combos[ok]
        cost = dist[combos].sum(axis=1)
        best = cost.min()
        tied = combos[np.isclose(cost, best, rtol=0, atol=1e-12)]
        keyed = sorted((tuple(sorted(ids[c] for c in row)), tuple(row)) for row in tied)
        return np.array(keyed[0][1])
    return _beam(ids, x, dist, x0, deltas, k)


def _ranks(ids):
    return np.argsort(np.argsort(np.array([str(u) for u in ids]), kind="stable"), kind="stable")


def _violation(means, x0, deltas):
    excess = np.maximum(np.abs(means - x0) - deltas - 1e-12, 0.0)
    return (excess / deltas).sum(axis=-1)


def _beam(ids, x, dist, x0, deltas, k):
    order = np.lexsort((_ranks(ids), dist))
    sx = (x - x0) / deltas  # standardized offsets; feasible iff |mean| <= 1 per column
    beam = [()]
    for step in range(k):
        cand = []
        for sub in beam:
            start = sub[-1] + 1 if sub else 0
            base = sx[order[list(sub)]].sum(axis=0) if sub else np.zeros(sx.shape[1])
            nxt = np.arange(start, len(order) - (k - step - 1))
            if nxt.size == 0:
                continue
            tot = base + sx[order[nxt]]
            # partial sums scored against the final size so early picks stay centred
            score = np.abs(tot / k).sum(axis=1) + 1e-3 * dist[order[nxt]]
            for j in np.argsort(score, kind="stable")[:BEAM_WIDTH]:
                cand.append((score[j], sub + (int(nxt[j]),)))
        cand.sort(key=lambda c: c[0])
        beam = [c[1] for c in cand[:BEAM_WIDTH]]
        if not beam:
            return None
    best = None
    for sub in beam:
        rows = order[list(sub)]
        if _violation(x[rows].mean(axis=0), x0, deltas) == 0:
            key = (dist[rows].sum(), tuple(sorted(ids[r] for r in rows)))
            if best is None or key < best[0]:
                best = (key, rows)
    if best is not None:
        return best[1]
    return _swap_repair(x, dist, x0, deltas, order[list(beam[0])])


def _swap_repair(x, dist, x0, deltas, rows, max_rounds=50):
    rows = list(rows)
    for _ in range(max_rounds):
        cur = _violation(x[rows].mean(axis=0), x0, deltas)
        if cur == 0:
            return np.array(rows)
        outside = np.setdiff1d(np.arange(len(x)), rows)
        best = (cur, None)
        for pos in range(len(rows)):
            trial = np.array(rows)
            others = x[np.delete(trial, pos)].sum(axis=0)
            means = (others[None, :] + x[outside]) / len(rows)
            v = _violation(means, x0, deltas)
            j = int(np.argmin(v))
            if v[j] < best[0] - 1e-12:
                best = (v[j], (pos, outside[j]))
        if best[1] is None:
            return None
        pos, new = best[1]
        rows[pos] = new
    return np.array(rows) if _violation(x[rows].mean(axis=0), x0, deltas) == 0 else None


def _covariate_row(d: PanelDataset, names, i, t):
    k = d.col(matching_time(t))
    return np.array([d.continuous[n][i, k] for n in names], dtype=float)


def _exact_key(d: PanelDataset, names, i, t):
    k = d.col(matching_time(t))
    return tuple(d.categorical[n][i, k] for n in names)


def _check_names(d: PanelDataset, spec: MatchSpec):
    for n in spec.exact_covariates:
        if n not in d.categorical:
            raise UnknownCovariate(f"unknown categorical covariate {n!r}")
    for n in spec.caliper_names:
        if n not in d.continuous:
            raise UnknownCovariate(f"unknown continuous covariate {n!r}")


def profile_match_one(treated, pool: Sequence, spec: MatchSpec, t: int, d: PanelDataset, set_id: int = 0):
    """Largest caliper-feasible control subset for ``treated`` drawn from ``pool``.

    Ties in size are broken by the smallest total caliper-standardized
    distance to the treated unit, then by the lowest sorted tuple of unit ids.
    Returns a :class:`MatchedSet` or :class:`Infeasible`.
    """
    _check_names(d, spec)
    idx = d.index
    ti = idx[treated]
    key = _exact_key(d, spec.exact_covariates, ti, t)
    cand = [u for u in pool if u != treated and _exact_key(d, spec.exact_covariates, idx[u], t) == key]
    if not cand:
        return Infeasible(treated, "no exact match")
    names = spec.caliper_names
    deltas = spec.deltas
    x0 = _covariate_row(d, names, ti, t)
    rows = np.array([idx[u] for u in cand])
    x = np.array([_covariate_row(d, names, i, t) for i in rows]).reshape(len(cand), len(names))
    bad = np.isnan(x).any(axis=1)
    if bad.any():
        cand = [u for u, b in zip(cand, bad) if not b]
        x = x[~bad]
    if not cand:
        return Infeasible(treated, "no exact match")
    ids = np.array(cand, dtype=object)
    dist = (np.abs(x - x0) / deltas).sum(axis=1) if names else np.zeros(len(cand))
    exhaustive = len(cand) <= EXHAUSTIVE_POOL_LIMIT
    for k in range(min(spec.max_controls, len(cand)), spec.min_controls - 1, -1):
        pick = _select(ids, x, dist, x0, deltas, k, exhaustive)
        if pick is not None:
            controls = tuple(sorted(ids[pick], key=lambda u: idx[u]))
            return MatchedSet(set_id, int(t), treated, controls)
    return Infeasible(treated, "no caliper-feasible subset")


def run_risk_set_matching(d: PanelDataset, spec: MatchSpec) -> MatchedDesign:
    """Sequential risk set matching over exposure times, consuming controls."""
    _check_names(d, spec)
    audit = MatchAudit()
    used = set()
    sets = []
    idx = d.index
    for t, (exposed, eligible) in build_risk_sets(d).items():
        pool = [u for u in eligible if u not in used]
        for u in sorted(exposed, key=lambda v: idx[v]):
            audit.exposed[t] += 1
            if u in used:
                audit.dropped[t] += 1
                audit.infeasible.append((u, t, "already used as a control"))
                continue
            res = profile_match_one(u, pool, spec, t, d, set_id=len(sets))
            if not res:
                audit.dropped[t] += 1
                audit.infeasible.append((u, t, res.reason))
                log.info("dropped exposed unit %s at t=%d: %s", u, t, res.reason)
                continue
            sets.append(res)
            used.add(u)
            used.update(res.control_units)
            taken = set(res.control_units)
            pool = [v for v in pool if v not in taken]
            audit.matched[t] += 1
            audit.set_sizes[res.n_controls] += 1
    return MatchedDesign(tuple(sets), spec, audit)


# ---------------------------------------------------------------------------
# balance


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    subgroup: str
    treated_mean: float
    control_mean: float
    pooled_sd: float
    asamd: float
    degenerate: bool = False


@dataclass
class BalanceReport:
    rows: list

    def to_frame(self):
        return pd.DataFrame([r.__dict__ for r in self.rows])


def _covariate_values(d: PanelDataset, name: str, ms: MatchedSet):
    k = d.col(matching_time(ms.exposure_time))
    idx = d.index
    if name in d.continuous:
        arr = d.continuous[name]
        return arr[idx[ms.treated_unit], k], np.array([arr[idx[c], k] for c in ms.control_units])
    if name in d.categorical:
        raise TypeError("categorical covariate; pass name=level")
    raise UnknownCovariate(name)


def _indicator_values(d: PanelDataset, name: str, level: str, ms: MatchedSet):
    k = d.col(matching_time(ms.exposure_time))
    idx = d.index
    arr = d.categorical[name]
    return float(arr[idx[ms.treated_unit], k] == level), np.array(
        [float(arr[idx[c], k] == level) for c in ms.control_units]
    )


def balance_covariates(d: PanelDataset) -> list:
    """Continuous covariates plus one indicator per categorical level (``name=level``)."""
    out = list(d.continuous)
    for name, arr in d.categorical.items():
        levels = sorted({v for v in arr.ravel() if v is not None})
        out.extend(f"{name}={lv}" for lv in levels)
    return out


def set_values(d: PanelDataset, covariate: str, ms: MatchedSet):
    """(treated value, control values) of a covariate at the set's matching time."""
    if "=" in covariate and covariate.split("=", 1)[0] in d.categorical:
        name, level = covariate.split("=", 1)
        return _indicator_values(d, name, level, ms)
    return _covariate_values(d, covariate, ms)


def compute_asamd(
    design: MatchedDesign,
    d: PanelDataset,
    subgroup: Optional[Callable] = None,
    covariates: Optional[Sequence] = None,
    label: str = "all",
) -> BalanceReport:
    """Absolute standardized mean differences over the selected sets.

    Control means weight each set equally and each control within a set by
    ``1/m_j``. The pooled sd is taken over every selected unit.
    """
    sets = [s for s in design.sets if subgroup is None or subgroup(s)]
    if not sets:
        raise ValueError("subgroup selects no matched sets")
    covariates = list(covariates) if covariates is not None else balance_covariates(d)
    rows = []
    for cov in covariates:
        tv, cm, pooled = [], [], []
        for s in sets:
            a, b = set_values(d, cov, s)
            tv.append(a)
            cm.append(b.mean())
            pooled.append(a)
            pooled.extend(b)
        tmean, cmean = float(np.mean(tv)), float(np.mean(cm))
        sd = float(np.std(pooled, ddof=1)) if len(pooled) > 1 else 0.0
        gap = abs(tmean - cmean)
        if sd > 0:
            rows.append(BalanceRow(cov, label, tmean, cmean, sd, gap / sd))
        else:
            rows.append(BalanceRow(cov, label, tmean, cmean, sd, 0.0 if gap == 0 else float("inf"), gap != 0))
    return BalanceReport(rows)


def asamd_value(treated_mean: float, control_mean: float, pooled_sd: float) -> float:
    return abs(treated_mean - control_mean) / pooled_sd


def aggregation_balance_bound(design: MatchedDesign, d: PanelDataset, subset, covariate: str):
    """(theoretical bound, attained imbalance) for aggregating the ``subset`` sets.

    The attained imbalance compares the mean treated value with the pooled
    control mean (each control counted once). Equal-size subsets are bounded
    by the caliper; otherwise the bound adds ``sum |1 - w_j| * |control mean_j|``
    with ``w_j = m_j |J*| / sum m``.
    """
    if covariate not in d.continuous:
        raise UnknownCovariate(f"unknown covariate {covariate!r}")
    calipers = dict(design.spec.caliper_covariates)
    if covariate not in calipers:
        raise UnknownCovariate(f"{covariate!r} is not a caliper covariate")
    by_id = design.by_id()
    sets = [by_id[i] for i in subset]
    if not sets:
        raise ValueError("subset must be nonempty")
    treated, cmeans, sizes = [], [], []
    for s in sets:
        a, b = _covariate_values(d, covariate, s)
        treated.append(a)
        cmeans.append(b.mean())
        sizes.append(len(b))
    return aggregation_bound_arrays(np.array(treated), np.array(cmeans), np.array(sizes), calipers[covariate])


def aggregation_bound_arrays(treated, control_means, sizes, delta):
    treated = np.asarray(treated, float)
    control_means = np.asarray(control_means, float)
    sizes = np.asarray(sizes, float)
    n = len(treated)
    attained = abs(treated.mean() - (control_means * sizes).sum() / sizes.sum())
    w = sizes * n / sizes.sum()
    bound = delta + float(np.sum(np.abs(1.0 - w) * np.abs(control_means)))
    return bound, float(attained)


# ---------------------------------------------------------------------------
# export


def design_rows(design: MatchedDesign, d: PanelDataset) -> list:
    rows = []
    for s in design.sets:
        rows.append((s.set_id, "treated", s.treated_unit, _fmt_time(d, s.treated_unit)))
        rows.extend((s.set_id, "control", c, _fmt_time(d, c)) for c in s.control_units)
    return rows


def _fmt_time(d, uid):
    z = d.exposure[d.index[uid]]
    return "" if z == NEVER else int(z)


def write_design(design: MatchedDesign, d: PanelDataset, csv_path, audit_path) -> None:
    pd.DataFrame(design_rows(design, d), columns=["set_id", "role", "unit_id", "exposure_time"]).to_csv(
        csv_path, index=False
    )
    side = {
        "version": DESIGN_VERSION,
        "spec": {
            "exact_covariates": list(design.spec.exact_covariates),
            "caliper_covariates": [[n, dl] for n, dl in design.spec.caliper_covariates],
            "max_controls": design.spec.max_controls,
            "min_controls": design.spec.min_controls,
        },
        "sets": [
            {"set_id": s.set_id, "exposure_time": s.exposure_time} for s in design.sets
        ],
        "audit": design.audit.to_dict(),
    }
    with open(audit_path, "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1)


def read_design(csv_path, audit_path) -> MatchedDesign:
    with open(audit_path, encoding="utf-8") as fh:
        side = json.load(fh)
    if side.get("version") != DESIGN_VERSION:
        raise ConfigError(f"unsupported design version {side.get('version')!r}")
    sp = side["spec"]
    spec = MatchSpec(
        tuple(sp["exact_covariates"]),
        tuple((n, dl) for n, dl in sp["caliper_covariates"]),
        sp["max_controls"],
        sp["min_controls"],
    )
    times = {e["set_id"]: e["exposure_time"] for e in side["sets"]}
    df = pd.read_csv(csv_path, dtype={"unit_id": str})
    sets = []
    for sid, grp in df.groupby("set_id", sort=True):
        treated = grp.loc[grp["role"] == "treated", "unit_id"].iloc[0]
        controls = tuple(grp.loc[grp["role"] == "control", "unit_id"])
        sets.append(MatchedSet(int(sid), int(times[int(sid)]), treated, controls))
    audit = MatchAudit()
    a = side["audit"]
    for row in a["per_time"]:
        audit.exposed[row["time"]] = row["exposed"]
        audit.matched[row["time"]] = row["matched"]
        audit.dropped[row["time"]] = row["dropped"]
    audit.set_sizes.update({int(k): v for k, v in a["set_size_histogram"].items()})
    audit.infeasible = [(r["unit_id"], r["time"], r["reason"]) for r in a["infeasible"]]
    return MatchedDesign(tuple(sets), spec, audit)
