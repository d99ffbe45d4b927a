"""De novo discovery of effect modifiers.

Matched sets are split at random into a discovery part and a testing part.
A regression tree grown on the discovery part's centered set contrasts
proposes subgroups; their heterogeneity is then tested with the submax
procedure on the testing part alone, which keeps the test valid despite
the data-driven choice of groups.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .cart import RegressionTree, TreeParams, fit_tree
from .errors import ConfigError, SplitError, UnknownCovariate
from .inference import DeltaSets, ci_from_deltas, collect_deltas, format_gamma, gamma_star_from_deltas
from .matching import MatchedDesign, matching_time
from .panel_data import PanelDataset
from .submax import ComparisonMatrix, SubmaxResult, minmax_from_deltas

log = logging.getLogger(__name__)

DISCOVERY = "discovery"
TESTING = "testing"
RIDGE_PENALTY = 1e-8


@dataclass
class SplitPlan:
    discovery_fraction: float = 0.25
    seed: int = 0
    assignment: Optional[dict] = None  # set id -> DISCOVERY | TESTING, filled by assign()

    def __post_init__(self):
        if not 0 < self.discovery_fraction < 1:
            raise SplitError(f"discovery fraction must lie in (0, 1), got {self.discovery_fraction}")

    def assign(self, set_ids: Sequence) -> dict:
        ids = list(set_ids)
        if len(ids) < 2:
            raise SplitError("need at least two matched sets to split")
        n_disc = int(round(self.discovery_fraction * len(ids)))
        if n_disc < 1 or n_disc > len(ids) - 1:
            raise SplitError(f"fraction {self.discovery_fraction} leaves one side empty for {len(ids)} sets")
        perm = np.random.default_rng(self.seed).permutation(len(ids))
        disc = set(perm[:n_disc].tolist())
        self.assignment = {s: (DISCOVERY if i in disc else TESTING) for i, s in enumerate(ids)}
        return self.assignment


def split_design(design: MatchedDesign, plan: SplitPlan):
    """Partition a design's sets into (discovery design, testing design)."""
    assignment = plan.assign(design.set_ids)
    disc = [s for s, side in assignment.items() if side == DISCOVERY]
    test = [s for s, side in assignment.items() if side == TESTING]
    return design.subset(disc), design.subset(test)


def split_rows(n: int, plan: SplitPlan):
    """Row indices (discovery, testing) for ``n`` sets; same draw as ``split_design``."""
    assignment = plan.assign(range(n))
    disc = np.array([i for i in range(n) if assignment[i] == DISCOVERY], dtype=int)
    test = np.array([i for i in range(n) if assignment[i] == TESTING], dtype=int)
    return disc, test


# ---------------------------------------------------------------------------
# features and responses


def set_features(design: MatchedDesign, d: PanelDataset, covariates: Sequence[str]) -> pd.DataFrame:
    """Exposed unit's covariates at matching time, one row per set (indexed by set id)."""
    if not covariates:
        raise ConfigError("no covariates given")
    for name in covariates:
        if name not in d.continuous and name not in d.categorical:
            raise UnknownCovariate(f"unknown covariate {name!r}")
    idx = d.index
    rows = []
    for ms in design.sets:
        i, k = idx[ms.treated_unit], d.col(matching_time(ms.exposure_time))
        rows.append(
            {name: (d.continuous[name][i, k] if name in d.continuous else d.categorical[name][i, k]) for name in covariates}
        )
    frame = pd.DataFrame(rows, index=pd.Index(design.set_ids, name="set_id"), columns=list(covariates))
    for name in covariates:
        if name in d.continuous:
            frame[name] = frame[name].astype(float)
    return frame


def availability_strata(features: pd.DataFrame) -> dict:
    """Rows grouped by which covariates they observe.

    Returns ``name -> (row labels, observed columns)``; the fully observed
    stratum is named ``"all"`` and others ``"without_<missing columns>"``.
    Rows observing no covariate are left out.
    """
    observed = features.notna()
    out = {}
    for pattern, rows in observed.groupby(list(observed.columns), sort=True).groups.items():
        pattern = pattern if isinstance(pattern, tuple) else (pattern,)
        cols = [c for c, ok in zip(features.columns, pattern) if ok]
        if not cols:
            log.warning("%d sets observe none of the covariates; left out of discovery", len(rows))
            continue
        missing = [str(c) for c, ok in zip(features.columns, pattern) if not ok]
        name = "all" if not missing else "without_" + "_".join(missing)
        out[name] = (list(rows), cols)
    return out


def centered_contrasts(ds: DeltaSets) -> np.ndarray:
    c = ds.contrasts()
    return c - c.mean()


def fit_cart_deltas(ds: DeltaSets, features: pd.DataFrame, params: TreeParams = TreeParams()) -> RegressionTree:
    X = features.loc[list(ds.set_ids)] if not features.index.equals(pd.Index(ds.set_ids)) else features
    return fit_tree(X.reset_index(drop=True), centered_contrasts(ds), params)


def fit_cart(
    design: MatchedDesign, d: PanelDataset, outcome: str, h, covariates: Sequence[str], params: TreeParams = TreeParams()
) -> RegressionTree:
    """Tree on the discovery sets' centered contrasts against exposed-unit covariates."""
    if not covariates:
        raise ConfigError("no covariates given")
    ds = collect_deltas(design, d, outcome, h)
    return fit_cart_deltas(ds, set_features(design, d, covariates), params)


# ---------------------------------------------------------------------------
# subgroups


@dataclass
class Subgroups:
    tree: RegressionTree
    leaf_ids: list
    cmat: ComparisonMatrix

    def labels_for(self, features: pd.DataFrame) -> np.ndarray:
        """Column index in ``cmat`` of the leaf each row falls in."""
        pos = {lid: j for j, lid in enumerate(self.leaf_ids)}
        return np.array([pos[i] for i in self.tree.apply(features.reset_index(drop=True))], dtype=int)

    def groups(self, features: pd.DataFrame) -> dict:
        return dict(zip(features.index, self.labels_for(features).tolist()))


def extract_groups(tree: RegressionTree) -> Subgroups:
    """One comparison per leaf and one per internal node (the union of leaves below it)."""
    leaves = tree.leaves()
    pos = {n.id: j for j, n in enumerate(leaves)}
    rows = [np.eye(len(leaves), dtype=int)[j] for j in range(len(leaves))]
    labels = [tree.predicate(n) for n in leaves]
    if len(leaves) > 1:
        for node in tree.internal():
            under = [m for m in _subtree(node) if m.is_leaf]
            row = np.zeros(len(leaves), dtype=int)
            row[[pos[m.id] for m in under]] = 1
            rows.append(row)
            labels.append(tree.predicate(node))
    return Subgroups(tree, [n.id for n in leaves], ComparisonMatrix(np.array(rows), tuple(labels)))


def _subtree(node):
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        if not n.is_leaf:
            stack.extend([n.right, n.left])


@dataclass(frozen=True)
class LeafSummary:
    label: str
    n_sets: int
    estimate: float
    ci: tuple
    gamma_star: Optional[float]
    rejected: bool

    def row(self) -> dict:
        return {
            "leaf": self.label,
            "n_sets": self.n_sets,
            "estimate": self.estimate,
            "ci_lower": self.ci[0],
            "ci_upper": self.ci[1],
            "gamma_star": format_gamma(self.gamma_star),
            "rejected": self.rejected,
        }


def confirm_from_deltas(
    ds: DeltaSets,
    labels: np.ndarray,
    cmat: ComparisonMatrix,
    alpha: float = 0.05,
    alpha1: Optional[float] = None,
    gamma: float = 1.0,
    leaf_summaries: bool = True,
    two_sided: bool = True,
    **kw,
) -> SubmaxResult:
    """Submax confirmation of leaf groups; deviates count in both directions by default,
    since a discovered leaf may sit above or below the average effect."""
    labels = np.asarray(labels, dtype=int)
    present = np.unique(labels)
    if len(present) < cmat.G:
        empty = sorted(set(range(cmat.G)) - set(present.tolist()))
        warnings.warn(f"dropping {len(empty)} leaves with no testing sets: {empty}", RuntimeWarning)
        remap = {g: j for j, g in enumerate(present)}
        labels = np.array([remap[g] for g in labels], dtype=int)
        cmat = cmat.drop_groups(present)
    res = minmax_from_deltas(ds, labels, cmat, alpha, alpha1, gamma, group_ids=tuple(present.tolist()), two_sided=two_sided, **kw)
    if leaf_summaries:
        out = []
        for k, dec in enumerate(res.per_comparison):
            cols = np.flatnonzero(cmat.c[k])
            if len(cols) != 1:
                continue
            sub = ds.take(np.flatnonzero(labels == cols[0]))
            ci = ci_from_deltas(sub, alpha, 1.0) if dec.rejected else (float("nan"), float("nan"))
            out.append(
                LeafSummary(
                    dec.label,
                    len(sub),
                    float(np.mean(sub.contrasts())),
                    (float(ci[0]), float(ci[1])),
                    gamma_star_from_deltas(sub, alpha),
                    dec.rejected,
                )
            )
        res.extras["leaves"] = out
    return res


def confirm_subgroups(
    design: MatchedDesign,
    d: PanelDataset,
    outcome: str,
    h,
    groups: Mapping,
    cmat: ComparisonMatrix,
    alpha: float = 0.05,
    alpha1: Optional[float] = None,
    gamma: float = 1.0,
    **kw,
) -> SubmaxResult:
    """Submax test of the discovered groups on the testing design only.

    ``groups`` maps set id to a column of ``cmat`` (a leaf); leaves absent
    from the testing sets are dropped with a warning.
    """
    ds = collect_deltas(design, d, outcome, h)
    missing = [int(s) for s in ds.set_ids if s not in groups]
    if missing:
        raise ConfigError(f"{len(missing)} testing sets have no leaf, e.g. {missing[:5]}")
    labels = np.array([groups[int(s)] for s in ds.set_ids], dtype=int)
    return confirm_from_deltas(ds, labels, cmat, alpha, alpha1, gamma, **kw)


def annotate_tree(sub: Subgroups, result: SubmaxResult) -> None:
    """Copy per-leaf confirmation results onto the tree's leaves for export."""
    by_label = {s.label: s for s in result.extras.get("leaves", [])}
    for node in sub.tree.leaves():
        s = by_label.get(sub.tree.predicate(node))
        if s is None:
            continue
        node.extra.update(
            testing_sets=s.n_sets,
            rejected=s.rejected,
            ci=[s.ci[0], s.ci[1]],
            gamma_star=format_gamma(s.gamma_star),
        )


# ---------------------------------------------------------------------------
# R^2 bounds


@dataclass(frozen=True)
class R2Bounds:
    lower: float
    upper: float
    n_sets: int = 0
    ridge: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(f"invalid bounds ({self.lower}, {self.upper})")


def design_matrix(features: pd.DataFrame) -> np.ndarray:
    """Intercept, numeric columns, and one-hot categoricals without their first level."""
    parts = [np.ones((len(features), 1))]
    for name in features.columns:
        col = features[name]
        if pd.api.types.is_numeric_dtype(col) and not pd.api.types.is_bool_dtype(col):
            parts.append(col.to_numpy(dtype=float)[:, None])
        else:
            dummies = pd.get_dummies(col.astype(str), drop_first=True, dtype=float)
            parts.append(dummies.to_numpy())
    return np.hstack(parts)


def r2_from_deltas(ds: DeltaSets, features: pd.DataFrame) -> R2Bounds:
    X = design_matrix(features)
    n, p = X.shape
    if n < (p - 1) + 2:
        raise ConfigError(f"{n} sets cannot support {p - 1} regression columns")
    c = centered_contrasts(ds)
    ridge = np.linalg.matrix_rank(X) < p
    if ridge:
        log.warning("singular covariate matrix; using a ridge penalty of %g", RIDGE_PENALTY)
        beta = np.linalg.solve(X.T @ X + RIDGE_PENALTY * np.eye(p), X.T @ c)
    else:
        beta = np.linalg.lstsq(X, c, rcond=None)[0]
    fit = X @ beta
    total = float(np.var(c))
    if total <= 0:
        return R2Bounds(0.0, 0.0, n, ridge)
    explained = float(np.var(fit))
    # contrast noise: within-set control variability, which the exposed unit shares
    controls = ds.deltas[:, 1:]
    J = ds.sizes - 1
    multi = J >= 2
    if multi.any():
        dev = controls[multi] - np.nanmean(controls[multi], axis=1, keepdims=True)
        pooled = float(np.nansum(dev**2) / np.sum(J[multi] - 1))
    else:
        pooled = 0.0
    noise = float(np.mean(pooled * (1.0 + 1.0 / J)))
    lower = min(max(explained / total, 0.0), 1.0)
    floor = total - noise
    upper = 1.0 if floor <= 0 else min(max(explained / floor, lower), 1.0)
    return R2Bounds(lower, upper, n, bool(ridge))


def r2_bounds(design: MatchedDesign, d: PanelDataset, outcome: str, h, covariates: Sequence[str]) -> R2Bounds:
    """Bounds on the share of effect variation explained by the exposed unit's covariates."""
    ds = collect_deltas(design, d, outcome, h)
    kept = design.subset(ds.set_ids.tolist())
    return r2_from_deltas(ds, set_features(kept, d, covariates).loc[list(ds.set_ids)])


def write_r2(rows: Sequence[tuple], path) -> None:
    """Rows of (outcome, horizon, R2Bounds) as a table."""
    frame = pd.DataFrame(
        [{"outcome": o, "horizon": str(getattr(h, "value", h)), "lower": b.lower, "upper": b.upper} for o, h, b in rows],
        columns=["outcome", "horizon", "lower", "upper"],
    )
    frame.to_csv(path, index=False)
