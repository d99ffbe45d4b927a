"""Difference-in-differences randomization inference for matched sets.

Every matched set contributes the vector of first differences of its
members (exposed unit first). Under a sharp null ``effect = tau0`` the
exposed unit's difference is shifted by ``-tau0`` and the set's score for
member ``j`` is its difference minus the mean difference of the others.
The test statistic is the sum of the exposed members' scores; its null law
comes from the random position of the exposed unit within each set and is
normal-approximated across sets (the permutational t-test). Sensitivity to
hidden bias uses worst-case assignment probabilities proportional to
``Gamma ** u`` with binary ``u``.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import DomainError, EmptyDesign, TruncatedHorizon
from .panel_data import PanelDataset

log = logging.getLogger(__name__)

GAMMA_CAP = 10.0
MAX_VERTEX_SET = 12
RESULT_COLUMNS = ["outcome", "horizon", "estimate", "p_value", "ci_lower", "ci_upper", "gamma_star"]


class Horizon(enum.Enum):
    MONTH = "month"
    YEAR = "year"

    @classmethod
    def parse(cls, value) -> "Horizon":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())

    def window(self, t: int) -> tuple:
        """(first, last) time points needed for an exposure at ``t``."""
        return (t - 1, t) if self is Horizon.MONTH else (t - 1, t + 11)


class DegenerateNull(UserWarning):
    """The null variance of the statistic is zero."""


@dataclass(frozen=True)
class SetContrasts:
    set_id: int
    assignment_scores: np.ndarray
    observed_index: int = 0

    @property
    def observed(self) -> float:
        return float(self.assignment_scores[self.observed_index])


# ---------------------------------------------------------------------------
# per-set first differences


def unit_difference(y: np.ndarray, t: int, h: Horizon) -> np.ndarray:
    """First-difference quantity for each row of ``y`` (columns are times 1..T).

    The year version is the mean of twelve monthly differences, which
    telescopes to ``(Y[t+11] - Y[t-1]) / 12``.
    """
    if h is Horizon.MONTH:
        return y[:, t - 1] - y[:, t - 2]
    return (y[:, t + 10] - y[:, t - 2]) / 12.0


def set_differences(ms, d: PanelDataset, outcome: str, h: Horizon) -> np.ndarray:
    h = Horizon.parse(h)
    lo, hi = h.window(ms.exposure_time)
    if lo < 1 or hi > d.T:
        raise TruncatedHorizon(ms.set_id)
    rows = [d.index[u] for u in ms.members]
    return unit_difference(d.outcomes[outcome][rows], ms.exposure_time, h)


def scores_from_differences(diffs: np.ndarray, tau0: float = 0.0, observed_index: int = 0) -> np.ndarray:
    x = np.array(diffs, dtype=float)
    x[observed_index] -= tau0
    n = len(x)
    return (n * x - x.sum()) / (n - 1)


def set_contrast(ms, d: PanelDataset, outcome: str, h, tau0: float = 0.0) -> SetContrasts:
    diffs = set_differences(ms, d, outcome, h)
    return SetContrasts(ms.set_id, scores_from_differences(diffs, tau0), 0)


@dataclass(frozen=True, eq=False)
class DeltaSets:
    """First differences of all usable sets, padded with NaN to a common width.

    Column 0 is the exposed unit. ``excluded`` lists sets dropped because
    their horizon runs past the panel.
    """

    set_ids: np.ndarray
    deltas: np.ndarray
    sizes: np.ndarray
    excluded: tuple = ()

    @classmethod
    def from_list(cls, set_ids, diffs: Sequence, excluded=()) -> "DeltaSets":
        sizes = np.array([len(x) for x in diffs], dtype=int)
        width = int(sizes.max()) if len(diffs) else 2
        mat = np.full((len(diffs), width), np.nan)
        for i, x in enumerate(diffs):
            mat[i, : len(x)] = x
        return cls(np.asarray(set_ids), mat, sizes, tuple(excluded))

    def __len__(self):
        return len(self.sizes)

    def take(self, rows) -> "DeltaSets":
        rows = np.asarray(rows)
        return DeltaSets(self.set_ids[rows], self.deltas[rows], self.sizes[rows], self.excluded)

    def contrasts(self) -> np.ndarray:
        """Exposed difference minus mean control difference, per set."""
        return self.deltas[:, 0] - np.nansum(self.deltas[:, 1:], axis=1) / (self.sizes - 1)

    def scores(self, tau0: float = 0.0) -> np.ndarray:
        x = self.deltas.copy()
        x[:, 0] -= tau0
        n = self.sizes[:, None].astype(float)
        tot = np.nansum(x, axis=1)[:, None]
        return (n * x - tot) / (n - 1)

    def statistic(self, tau0: float = 0.0) -> float:
        return float(np.sum(self.contrasts() - tau0))

    def set_contrasts(self, tau0: float = 0.0) -> list:
        a = self.scores(tau0)
        return [SetContrasts(int(s), a[i, : self.sizes[i]].copy(), 0) for i, s in enumerate(self.set_ids)]


def collect_deltas(design, d: PanelDataset, outcome: str, h) -> DeltaSets:
    if isinstance(design, DeltaSets):
        return design
    h = Horizon.parse(h)
    ids, diffs, excluded = [], [], []
    for ms in design.sets:
        try:
            diffs.append(set_differences(ms, d, outcome, h))
            ids.append(ms.set_id)
        except TruncatedHorizon:
            excluded.append(ms.set_id)
    if excluded:
        log.info("%d sets excluded: %s horizon runs past the panel", len(excluded), h.value)
    return DeltaSets.from_list(ids, diffs, excluded)


def _usable(design, d, outcome, h) -> DeltaSets:
    ds = collect_deltas(design, d, outcome, h)
    if len(ds) == 0:
        raise EmptyDesign("no matched set has outcomes over the requested horizon")
    return ds


# ---------------------------------------------------------------------------
# null moments


def _moments_sorted(a: np.ndarray, gamma: float):
    """Worst-case (largest) mean and its variance for rows of ``a`` sorted descending."""
    m, n = a.shape
    if gamma == 1.0:
        mean = a.sum(axis=1) / n
        return mean, (a * a).sum(axis=1) / n - mean * mean
    cs = np.cumsum(a, axis=1)
    cs2 = np.cumsum(a * a, axis=1)
    tot, tot2 = cs[:, -1:], cs2[:, -1:]
    h = np.arange(1, n + 1)[None, :]
    denom = h * gamma + (n - h)
    top, rest = gamma / denom, 1.0 / denom
    means = top * cs + rest * (tot - cs)
    second = top * cs2 + rest * (tot2 - cs2)
    varis = second - means * means
    best = means.max(axis=1, keepdims=True)
    tied = means >= best - 1e-12 * (1.0 + np.abs(best))
    var = np.where(tied, varis, -np.inf).max(axis=1)
    return best[:, 0], var


def set_moments(scores: np.ndarray, sizes: np.ndarray, gamma: float = 1.0, tail: str = "upper"):
    """Per-set worst-case null mean and variance of the exposed member's score.

    ``scores`` is padded with NaN beyond each set's size. For the lower tail
    the mean is minimised instead.
    """
    if gamma < 1:
        raise DomainError(f"gamma must be >= 1, got {gamma}")
    mean = np.empty(len(sizes))
    var = np.empty(len(sizes))
    sign = 1.0 if tail == "upper" else -1.0
    for n in np.unique(sizes):
        rows = np.flatnonzero(sizes == n)
        a = sign * scores[rows, :n]
        a = -np.sort(-a, axis=1)
        mu, v = _moments_sorted(a, float(gamma))
        mean[rows] = sign * mu
        var[rows] = np.maximum(v, 0.0)
    return mean, var


def set_min_variance(scores: np.ndarray, sizes: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Smallest null variance per set over every assignment law allowed at ``gamma``.

    Variance is concave in the assignment probabilities, so the minimum sits
    at a vertex of the allowed polytope: a binary ``u`` over any subset.
    """
    out = np.empty(len(sizes))
    for n in np.unique(sizes):
        rows = np.flatnonzero(sizes == n)
        a = scores[rows, :n]
        if gamma == 1.0 or n > MAX_VERTEX_SET:
            _, v = _moments_sorted(-np.sort(-a, axis=1), float(gamma))
            out[rows] = np.maximum(v, 0.0)
            continue
        masks = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
        w = np.power(float(gamma), masks)
        w /= w.sum(axis=1, keepdims=True)
        m1 = a @ w.T
        m2 = (a * a) @ w.T
        out[rows] = np.maximum((m2 - m1 * m1).min(axis=1), 0.0)
    return out


def affine_moments(ds: DeltaSets):
    """Per-set terms of the Gamma = 1 null moments as exact functions of ``tau0``.

    Shifting ``tau0`` lowers the exposed score by ``tau0`` and raises every
    other score by ``tau0 / (n - 1)``, so with ``a`` the scores at zero the
    exposed score is ``a0 - tau0`` and the null variance is
    ``m0 - 2 tau0 a0 / (n - 1) + tau0**2 / (n - 1)``. Returns ``(a0, m0, n - 1)``.
    """
    a = ds.scores(0.0)
    n = ds.sizes.astype(float)
    return a[:, 0], np.nansum(a * a, axis=1) / n, n - 1.0


def permutation_moments(contrasts: Sequence[SetContrasts], gamma: float = 1.0, tail: str = "upper"):
    """Null (mean, variance) of the summed statistic, worst case over the sensitivity model."""
    if gamma < 1:
        raise DomainError(f"gamma must be >= 1, got {gamma}")
    if not contrasts:
        return 0.0, 0.0
    sizes = np.array([len(c.assignment_scores) for c in contrasts])
    mat = np.full((len(contrasts), sizes.max()), np.nan)
    for i, c in enumerate(contrasts):
        mat[i, : sizes[i]] = c.assignment_scores
    mean, var = set_moments(mat, sizes, gamma, tail)
    return float(mean.sum()), float(var.sum())


# ---------------------------------------------------------------------------
# tests


def _tail_p(stat, mu, s2, tail):
    if s2 <= 1e-300:
        warnings.warn("null variance is zero", DegenerateNull, stacklevel=3)
        if tail == "upper":
            return 1.0 if stat <= mu else 0.0
        return 1.0 if stat >= mu else 0.0
    z = (stat - mu) / math.sqrt(s2)
    return float(norm.sf(z)) if tail == "upper" else float(norm.cdf(z))


def _one_sided(a, sizes, stat, gamma, tail):
    mu, var = set_moments(a, sizes, gamma, tail)
    mu, var = mu.sum(), var.sum()
    beyond = stat <= mu if tail == "upper" else stat >= mu
    if gamma > 1.0 and beyond and var > 0:
        # the worst-case null mean already lies past the statistic; pair it with the
        # smallest attainable variance so p stays nondecreasing in gamma
        var = set_min_variance(a, sizes, gamma).sum()
    return _tail_p(stat, mu, var, tail)


def pvalue_from_deltas(ds: DeltaSets, tau0: float = 0.0, gamma: float = 1.0, side: str = "two-sided") -> float:
    if gamma < 1:
        raise DomainError(f"gamma must be >= 1, got {gamma}")
    a = ds.scores(tau0)
    stat = float(np.sum(a[:, 0]))
    if side in ("upper", "lower"):
        return _one_sided(a, ds.sizes, stat, gamma, side)
    if side != "two-sided":
        raise ValueError(f"unknown side {side!r}")
    pu = _one_sided(a, ds.sizes, stat, gamma, "upper")
    pl = _one_sided(a, ds.sizes, stat, gamma, "lower")
    return min(1.0, 2.0 * min(pu, pl))


def did_statistic(design, d: Optional[PanelDataset] = None, outcome: str = "y", h="month", tau0: float = 0.0) -> float:
    return _usable(design, d, outcome, h).statistic(tau0)


def permutation_test(
    design, d: Optional[PanelDataset] = None, outcome: str = "y", h="month", tau0=0.0, gamma=1.0, side="two-sided"
) -> float:
    """Normal-approximation p-value of the permutational t-test, worst case at ``gamma``."""
    return pvalue_from_deltas(_usable(design, d, outcome, h), tau0, gamma, side)


def point_estimate(design, d: Optional[PanelDataset] = None, outcome: str = "y", h="month") -> float:
    """Mean over sets of (exposed difference - mean control difference).

    This is the null effect at which the statistic equals its Gamma = 1 null
    expectation of zero.
    """
    return float(np.mean(_usable(design, d, outcome, h).contrasts()))


def _scale(ds: DeltaSets) -> float:
    c = ds.contrasts()
    s = float(np.std(c)) if len(c) > 1 else abs(float(c[0]))
    return s if s > 0 else 1.0


def ci_from_deltas(ds: DeltaSets, alpha: float = 0.05, gamma: float = 1.0, tol: float = 1e-6):
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    c = ds.contrasts()
    if not np.all(np.isfinite(c)):
        return (float("nan"), float("nan"))
    est = float(np.mean(c))
    scale = _scale(ds)
    xtol = tol * scale
    if gamma == 1.0:
        exact = _ci_gamma1(ds, alpha)
        if exact is not None:
            return exact

    def accept(tau):
        return pvalue_from_deltas(ds, tau, gamma, "two-sided") > alpha

    def endpoint(direction):
        if not accept(est):
            return est
        step = scale / math.sqrt(len(ds))
        inside, outside = est, None
        for _ in range(80):
            probe = est + direction * step
            if not accept(probe):
                outside = probe
                break
            inside = probe
            step *= 2.0
        if outside is None:
            return direction * math.inf
        while abs(outside - inside) > xtol:
            mid = 0.5 * (inside + outside)
            if accept(mid):
                inside = mid
            else:
                outside = mid
        return inside

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateNull)
        return endpoint(-1.0), endpoint(1.0)


def _ci_gamma1(ds: DeltaSets, alpha: float):
    """Closed-form Gamma = 1 interval: ``|T(tau)| < z sd(tau)`` is a quadratic inequality."""
    a0, m0, k = affine_moments(ds)
    z2 = norm.isf(alpha / 2.0) ** 2
    t0, n = a0.sum(), float(len(a0))
    M0, M1, M2 = m0.sum(), -(a0 / k).sum(), (1.0 / k).sum()
    qa = n * n - z2 * M2
    qb = -2.0 * (t0 * n + z2 * M1)
    qc = t0 * t0 - z2 * M0
    disc = qb * qb - 4.0 * qa * qc
    if qa <= 0 or disc <= 0 or M0 <= 0:
        return None
    r = math.sqrt(disc)
    return (-qb - r) / (2.0 * qa), (-qb + r) / (2.0 * qa)


def confidence_interval(design, d: Optional[PanelDataset] = None, outcome: str = "y", h="month", alpha=0.05, gamma=1.0):
    """Two-sided interval ``{tau0 : p(tau0) > alpha}`` found by bisection outward from the estimate."""
    return ci_from_deltas(_usable(design, d, outcome, h), alpha, gamma)


def gamma_star_from_deltas(ds: DeltaSets, alpha=0.05, side="two-sided", tau0=0.0, cap=GAMMA_CAP, tol=0.01):
    """Largest Gamma keeping ``p <= alpha``; ``None`` if not significant, ``inf`` beyond ``cap``."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")

    def p(g):
        return pvalue_from_deltas(ds, tau0, g, side)

    if p(1.0) > alpha:
        return None
    if p(cap) <= alpha:
        return math.inf
    lo, hi = 1.0, cap
    while hi - lo > tol / 2:
        mid = 0.5 * (lo + hi)
        if p(mid) <= alpha:
            lo = mid
        else:
            hi = mid
    return math.floor(lo * 100 + 1e-9) / 100


def gamma_star(design, d: Optional[PanelDataset] = None, outcome: str = "y", h="month", alpha=0.05, side="two-sided"):
    return gamma_star_from_deltas(_usable(design, d, outcome, h), alpha, side)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class DidResult:
    outcome: str
    horizon: str
    estimate: float
    p_value: float
    ci: tuple
    gamma_star: Optional[float]
    n_sets: int = 0
    n_excluded: int = 0

    def row(self) -> dict:
        return {
            "outcome": self.outcome,
            "horizon": self.horizon,
            "estimate": self.estimate,
            "p_value": self.p_value,
            "ci_lower": self.ci[0],
            "ci_upper": self.ci[1],
            "gamma_star": format_gamma(self.gamma_star),
        }


def format_gamma(g, cap: float = GAMMA_CAP) -> str:
    if g is None:
        return "NA"
    if g > cap:
        return f">{cap:.2f}"
    return f"{g:.2f}"


def estimate_effect(design, d: PanelDataset, outcome: str, h, alpha: float = 0.05) -> DidResult:
    h = Horizon.parse(h)
    ds = _usable(design, d, outcome, h)
    return DidResult(
        outcome=outcome,
        horizon=h.value,
        estimate=float(np.mean(ds.contrasts())),
        p_value=pvalue_from_deltas(ds, 0.0, 1.0, "two-sided"),
        ci=ci_from_deltas(ds, alpha),
        gamma_star=gamma_star_from_deltas(ds, alpha),
        n_sets=len(ds),
        n_excluded=len(ds.excluded),
    )


def write_results(results: Sequence[DidResult], path) -> None:
    pd.DataFrame([r.row() for r in results], columns=RESULT_COLUMNS).to_csv(path, index=False)
