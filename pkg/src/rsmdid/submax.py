"""Submax testing of effect modification across disjoint groups of matched sets.

Groups of sets get their own statistics ``T_g``; a comparison ``c_k`` sums a
subset of groups. Each comparison yields a standardized deviate and the
global null of a common effect is tested with the largest deviate, whose
critical value comes from the maximum of a correlated normal vector. As the
common effect is unknown, deviates are evaluated on a grid of effects
spanning its ``1 - alpha1`` confidence interval and the smallest
maximum over the grid is used, at level ``alpha2 = alpha - alpha1``.
Group-level hypotheses are tested by closed testing.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import ConfigError, DegenerateComparison, DomainError, GroupOverlap
from .inference import DeltaSets, affine_moments, ci_from_deltas, collect_deltas, set_moments

log = logging.getLogger(__name__)

DEFAULT_DRAWS = 200_000
GRID_POINTS = 101
EXHAUSTIVE_LIMIT = 20
SCREEN_DRAWS = 10_000
SCREEN_MARGIN = 0.15  # roughly six standard errors of a quantile from SCREEN_DRAWS draws


@dataclass(frozen=True)
class ComparisonMatrix:
    c: np.ndarray  # (K, G) of 0/1
    labels: tuple = ()

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=int))
        if not np.isin(c, (0, 1)).all():
            raise ConfigError("comparison entries must be 0 or 1")
        if (c.sum(axis=1) == 0).any():
            raise ConfigError("every comparison needs at least one group")
        object.__setattr__(self, "c", c)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"c{k + 1}" for k in range(c.shape[0])))

    @property
    def K(self) -> int:
        return self.c.shape[0]

    @property
    def G(self) -> int:
        return self.c.shape[1]

    @classmethod
    def identity(cls, G: int, with_total: bool = False) -> "ComparisonMatrix":
        rows = list(np.eye(G, dtype=int))
        labels = [f"g{g + 1}" for g in range(G)]
        if with_total and G > 1:
            rows.append(np.ones(G, dtype=int))
            labels.append("all")
        return cls(np.array(rows), tuple(labels))

    def drop_groups(self, keep: np.ndarray) -> "ComparisonMatrix":
        """Restrict to the kept group columns, dropping emptied rows."""
        c = self.c[:, keep]
        rows = c.sum(axis=1) > 0
        return ComparisonMatrix(c[rows], tuple(lb for lb, r in zip(self.labels, rows) if r))


@dataclass(frozen=True)
class GroupStats:
    T: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    group_ids: tuple


@dataclass(frozen=True)
class DeviatePack:
    s: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    deviates: np.ndarray


# ---------------------------------------------------------------------------
# group statistics


def _labels(ds: DeltaSets, groups) -> tuple:
    """Integer group label per usable set, plus the ordered group ids."""
    if isinstance(groups, Mapping):
        mapping = dict(groups)
    else:
        mapping = {}
        for g, members in enumerate(groups):
            for s in members:
                if s in mapping:
                    raise GroupOverlap(f"set {s} belongs to groups {mapping[s]} and {g}")
                mapping[s] = g
    missing = [int(s) for s in ds.set_ids if s not in mapping]
    if missing:
        raise ConfigError(f"{len(missing)} sets have no group, e.g. {missing[:5]}")
    gids = tuple(sorted({mapping[int(s)] for s in ds.set_ids}, key=lambda v: (str(type(v)), v)))
    pos = {g: i for i, g in enumerate(gids)}
    return np.array([pos[mapping[int(s)]] for s in ds.set_ids], dtype=int), gids


def _group_moments(ds: DeltaSets, labels: np.ndarray, G: int, tau: float, gamma: float):
    a = ds.scores(tau)
    mean, var = set_moments(a, ds.sizes, gamma, "upper")
    T = np.bincount(labels, a[:, 0], minlength=G)
    return T, np.bincount(labels, mean, minlength=G), np.bincount(labels, var, minlength=G)


def group_statistics(design, d, outcome, h, groups, tau: float = 0.0, gamma: float = 1.0) -> GroupStats:
    """Per-group statistic and worst-case null moments at common effect ``tau``."""
    ds = collect_deltas(design, d, outcome, h)
    labels, gids = _labels(ds, groups)
    T, mu, var = _group_moments(ds, labels, len(gids), tau, gamma)
    return GroupStats(T, mu, var, gids)


def build_deviates(gs: GroupStats, cmat: ComparisonMatrix, gamma: float = 1.0) -> DeviatePack:
    C = cmat.c
    if C.shape[1] != len(gs.T):
        raise ConfigError(f"comparison matrix has {C.shape[1]} groups, statistics have {len(gs.T)}")
    s = C @ gs.T
    theta = C @ gs.mu
    Sigma = (C * gs.var[None, :]) @ C.T
    sd = np.sqrt(np.diag(Sigma))
    for k in np.flatnonzero(sd <= 0):
        raise DegenerateComparison(int(k))
    rho = Sigma / np.outer(sd, sd)
    np.fill_diagonal(rho, 1.0)
    return DeviatePack(s, theta, Sigma, rho, (s - theta) / sd)


# ---------------------------------------------------------------------------
# critical values


def _repair(rho: np.ndarray) -> np.ndarray:
    rho = 0.5 * (rho + rho.T)
    w, v = np.linalg.eigh(rho)
    if w.min() < -1e-10:
        warnings.warn(f"correlation matrix not PSD (min eigenvalue {w.min():.3g}); clipping", RuntimeWarning)
    w = np.clip(w, 0.0, None)
    fixed = (v * w) @ v.T
    d = np.sqrt(np.diag(fixed))
    return fixed / np.outer(d, d)


def _upper_quantile(x: np.ndarray, alpha: float) -> float:
    n = len(x)
    k = min(n - 1, max(0, math.ceil((1.0 - alpha) * n) - 1))
    return float(np.partition(x, k)[k])


def critical_value(rho, alpha2: float, n_draws: int = DEFAULT_DRAWS, seed: int = 0, batches: int = 20):
    """Monte Carlo ``1 - alpha2`` quantile of the max of ``N(0, rho)``.

    Returns ``(kappa, mc_se)``; the standard error comes from batch quantiles.
    """
    if not 0 < alpha2 < 1:
        raise DomainError("alpha2 must lie in (0, 1)")
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    rho = _repair(rho)
    w, v = np.linalg.eigh(rho)
    load = v * np.sqrt(np.clip(w, 0.0, None))
    z = np.random.default_rng(seed).standard_normal((int(n_draws), rho.shape[0]))
    mx = (z @ load.T).max(axis=1)
    kappa = _upper_quantile(mx, alpha2)
    parts = [_upper_quantile(b, alpha2) for b in np.array_split(mx, batches)]
    return kappa, float(np.std(parts, ddof=1) / math.sqrt(batches))


# ---------------------------------------------------------------------------
# closed testing


def closed_testing(evaluator, K: int, alpha2: float = 0.05, method: str = "shortcut") -> np.ndarray:
    """Closed-testing rejections for ``K`` elementary hypotheses.

    ``evaluator(subset)`` tests the intersection hypothesis over a tuple of
    comparison indices and returns True to reject. The shortcut additionally
    needs ``evaluator.singleton(k)`` (the statistic of comparison k alone)
    and ``evaluator.exceeds(value, subset)`` (value above the subset's
    critical value); for a max-type statistic with nested critical values it
    is a step-down that never rejects more than full closure.
    """
    if method == "exhaustive":
        if K > EXHAUSTIVE_LIMIT:
            raise ConfigError(f"refusing exhaustive closure over 2^{K} subsets; use the shortcut")
        rejected = np.ones(K, dtype=bool)
        for r in range(1, K + 1):
            for sub in itertools.combinations(range(K), r):
                if not rejected[list(sub)].any():
                    continue
                if not evaluator(sub):
                    rejected[list(sub)] = False
        return rejected
    if method != "shortcut":
        raise ValueError(f"unknown closed-testing method {method!r}")
    rejected = np.zeros(K, dtype=bool)
    remaining = list(range(K))
    if not evaluator(tuple(remaining)):
        return rejected
    while remaining:
        stats = [evaluator.singleton(k) for k in remaining]
        j = remaining[int(np.argmax(stats))]
        if not evaluator.exceeds(max(stats), tuple(remaining)):
            break
        rejected[j] = True
        remaining.remove(j)
        if remaining and not evaluator(tuple(remaining)):
            break
    return rejected


class GridEvaluator:
    """Intersection tests for the min-max deviate over a grid of common effects.

    Critical values use one bank of normal draws per group (common random
    numbers), so estimated quantiles are nested across subsets and smooth in
    the effect. A subset's critical value is the maximum over the grid.
    Exact bounds ``z_{1-a} <= kappa_A <= z_{1-a/|A|}`` settle most decisions
    without simulation.
    """

    def __init__(self, D, load, alpha2, n_draws=DEFAULT_DRAWS, seed=0, two_sided=False):
        self.D = np.asarray(D)  # (n_grid, K) or (n_grid, 2K) when two-sided
        self.load = np.asarray(load)  # (n_grid, G, same columns): +-c_kg sqrt(V_g) / sigma_k
        self.two_sided = two_sided
        self.alpha2 = alpha2
        self.n_draws = int(n_draws)
        self.seed = seed
        self._z = None
        self._kappa = {}
        self.z_single = float(norm.isf(alpha2))

    @property
    def K(self):
        return self.D.shape[1] // 2 if self.two_sided else self.D.shape[1]

    def columns(self, subset) -> list:
        subset = list(subset)
        return subset + [k + self.K for k in subset] if self.two_sided else subset

    def draws(self):
        if self._z is None:
            z = np.random.default_rng(self.seed).standard_normal((self.n_draws, self.load.shape[1]))
            self._z = z.astype(np.float32)
        return self._z

    def stat(self, subset) -> float:
        return float(self.D[:, self.columns(subset)].max(axis=1).min())

    def singleton(self, k) -> float:
        return self.stat((k,))

    def kappa_at(self, subset, g, n: Optional[int] = None) -> float:
        """Critical value at grid point ``g`` from the first ``n`` draws (all by default)."""
        n = self.n_draws if n is None else min(n, self.n_draws)
        key = (tuple(subset), g, n)
        if key not in self._kappa:
            # (columns, draws) layout makes the max over columns a fast elementwise reduction
            x = self.load[g][:, self.columns(subset)].T.astype(np.float32) @ self.draws()[:n].T
            self._kappa[key] = _upper_quantile(x.max(axis=0), self.alpha2)
        return self._kappa[key]

    def kappa(self, subset) -> float:
        return max(self.kappa_at(subset, g) for g in range(self.D.shape[0]))

    def exceeds(self, value: float, subset) -> bool:
        """Whether ``value`` is above the subset's critical value at every grid point.

        Clear cases are settled by exact bounds or by a prefix of the draws;
        only values near the critical value use the whole bank.
        """
        if value <= self.z_single:
            return False
        if value > norm.isf(self.alpha2 / len(self.columns(subset))):
            return True
        grid = range(self.D.shape[0])
        if self.n_draws > SCREEN_DRAWS:
            rough = [self.kappa_at(subset, g, SCREEN_DRAWS) for g in grid]
            if max(rough) >= value + SCREEN_MARGIN:
                return False
            if max(rough) < value - SCREEN_MARGIN:
                return True
            # grid points whose rough value is clearly below need no refinement
            grid = [g for g in np.argsort(rough)[::-1] if rough[g] >= value - SCREEN_MARGIN]
        for g in grid:
            if self.kappa_at(subset, int(g)) >= value:
                return False
        return True

    def __call__(self, subset) -> bool:
        return self.exceeds(self.stat(subset), subset)

    def p_value(self, subset) -> float:
        """Largest grid-point exceedance probability of the subset's min-max statistic."""
        stat = self.stat(subset)
        if len(subset) == 1 and self.D.shape[0] == 1:
            return float(norm.sf(stat) * (2 if self.two_sided else 1))
        best = 0.0
        for g in range(self.D.shape[0]):
            x = (self.load[g][:, self.columns(subset)].T.astype(np.float32) @ self.draws().T).max(axis=0)
            best = max(best, float(np.mean(x > stat)))
        return best


# ---------------------------------------------------------------------------
# min-max test


@dataclass(frozen=True)
class ComparisonDecision:
    label: str
    deviate: float
    rejected: bool


@dataclass
class SubmaxResult:
    global_reject: bool
    minmax_deviate: float
    per_comparison: list
    alpha_split: tuple
    tau_grid: np.ndarray
    gamma: float = 1.0
    kappa: Optional[float] = None
    p_value: Optional[float] = None
    group_ids: tuple = ()
    cmat: Optional[ComparisonMatrix] = None
    extras: dict = field(default_factory=dict)

    @property
    def rejected_labels(self) -> list:
        return [c.label for c in self.per_comparison if c.rejected]

    def rows(self) -> list:
        out = [
            {"comparison": c.label, "deviate": c.deviate, "kappa": self.kappa, "rejected": c.rejected, "gamma": self.gamma}
            for c in self.per_comparison
        ]
        out.append(
            {
                "comparison": "global",
                "deviate": self.minmax_deviate,
                "kappa": self.kappa,
                "rejected": self.global_reject,
                "gamma": self.gamma,
            }
        )
        return out


def _grid_moments(ds: DeltaSets, labels: np.ndarray, G: int, grid: np.ndarray, gamma: float, tail: str):
    """Group statistic, worst-case mean and variance on every grid point, each ``(n_grid, G)``."""
    if gamma == 1.0:
        a0, m0, k = affine_moments(ds)
        count = np.bincount(labels, minlength=G).astype(float)
        T = np.bincount(labels, a0, minlength=G)[None, :] - grid[:, None] * count[None, :]
        var = (
            np.bincount(labels, m0, minlength=G)[None, :]
            - 2.0 * grid[:, None] * np.bincount(labels, a0 / k, minlength=G)[None, :]
            + grid[:, None] ** 2 * np.bincount(labels, 1.0 / k, minlength=G)[None, :]
        )
        return T, np.zeros_like(var), np.maximum(var, 0.0)
    out = []
    for t in grid:
        a = ds.scores(float(t))
        mean, var = set_moments(a, ds.sizes, gamma, tail)
        out.append(
            (
                np.bincount(labels, a[:, 0], minlength=G),
                np.bincount(labels, mean, minlength=G),
                np.bincount(labels, var, minlength=G),
            )
        )
    T, mu, var = (np.array(x) for x in zip(*out))
    return T, mu, var


def deviate_grid(
    ds: DeltaSets, labels: np.ndarray, G: int, cmat: ComparisonMatrix, grid, gamma: float = 1.0, two_sided: bool = False
):
    """Deviates ``(n_grid, K')`` and normalized loadings ``(n_grid, G, K')`` over ``grid``.

    With ``two_sided`` the columns ``K..2K-1`` hold each comparison's deviate
    below its smallest worst-case mean, so ``K' = 2K``.
    """
    C = cmat.c.astype(float)
    grid = np.asarray(grid, dtype=float)
    tails = [("upper", 1.0), ("lower", -1.0)] if two_sided else [("upper", 1.0)]
    Ds, loads = [], []
    for tail, sign in tails:
        T, mu, var = _grid_moments(ds, labels, G, grid, gamma, tail)
        sd = np.sqrt(var @ C.T)
        if (sd <= 0).any():
            raise DegenerateComparison(int(np.flatnonzero((sd <= 0).any(axis=0))[0]))
        Ds.append(sign * ((T - mu) @ C.T) / sd)
        loads.append(sign * np.sqrt(var)[:, :, None] * C.T[None, :, :] / sd[:, None, :])
    return np.concatenate(Ds, axis=1), np.concatenate(loads, axis=2)


def minmax_from_deltas(
    ds: DeltaSets,
    labels: np.ndarray,
    cmat: ComparisonMatrix,
    alpha: float = 0.05,
    alpha1: Optional[float] = None,
    gamma: float = 1.0,
    n_draws: int = DEFAULT_DRAWS,
    seed: int = 0,
    tau_grid=None,
    grid_points: int = GRID_POINTS,
    closure: str = "shortcut",
    report: bool = True,
    group_ids: tuple = (),
    two_sided: bool = False,
) -> SubmaxResult:
    if alpha1 is None:
        alpha1 = alpha / 2.0
    if not 0 < alpha1 < alpha < 1:
        raise DomainError("need 0 < alpha1 < alpha < 1")
    alpha2 = alpha - alpha1
    G = cmat.G
    if tau_grid is None:
        lo, hi = ci_from_deltas(ds, alpha1, gamma)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            c = ds.contrasts()
            span = 10.0 * (np.std(c) if len(c) > 1 else 1.0)
            log.warning("confidence interval is unbounded; clipping the effect grid to +/- %.3g", span)
            lo, hi = (np.mean(c) - span if not np.isfinite(lo) else lo), (np.mean(c) + span if not np.isfinite(hi) else hi)
        tau_grid = np.linspace(lo, hi, grid_points)
    tau_grid = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    D, load = deviate_grid(ds, labels, G, cmat, tau_grid, gamma, two_sided)
    ev = GridEvaluator(D, load, alpha2, n_draws, seed, two_sided)
    everything = tuple(range(cmat.K))
    stat = ev.stat(everything)
    reject = ev(everything)
    rej = closed_testing(ev, cmat.K, alpha2, closure) if reject else np.zeros(cmat.K, dtype=bool)
    per = [ComparisonDecision(lb, ev.singleton(k), bool(rej[k])) for k, lb in enumerate(cmat.labels)]
    res = SubmaxResult(
        global_reject=bool(reject),
        minmax_deviate=stat,
        per_comparison=per,
        alpha_split=(alpha1, alpha2),
        tau_grid=tau_grid,
        gamma=gamma,
        group_ids=group_ids,
        cmat=cmat,
    )
    if report:
        res.kappa = ev.kappa(everything)
        res.p_value = ev.p_value(everything)
    return res


def minmax_test(
    design,
    d,
    outcome,
    h,
    groups,
    cmat: ComparisonMatrix,
    alpha: float = 0.05,
    alpha1: Optional[float] = None,
    gamma: float = 1.0,
    **kw,
) -> SubmaxResult:
    """Global and per-comparison submax tests with the min-max deviate."""
    ds = collect_deltas(design, d, outcome, h)
    labels, gids = _labels(ds, groups)
    if cmat.G != len(gids):
        raise ConfigError(f"comparison matrix has {cmat.G} groups but the design has {len(gids)}")
    return minmax_from_deltas(ds, labels, cmat, alpha, alpha1, gamma, group_ids=gids, **kw)


def write_submax(result: SubmaxResult, path) -> None:
    pd.DataFrame(result.rows(), columns=["comparison", "deviate", "kappa", "rejected", "gamma"]).to_csv(
        path, index=False
    )
