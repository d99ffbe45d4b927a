"""Longitudinal panels with staggered exposure times.

A :class:`PanelDataset` keeps one ``(n_units, T)`` array per outcome and per
covariate. Exposure times are stored as floats with ``NEVER`` (``inf``) for
units that are never exposed, so "not yet exposed by t" is simply ``Z > t``.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd
import yaml

from .errors import BadExposure, ConfigError, DuplicateRow, MissingData

NEVER = math.inf
PANEL_VERSION = "panel/v1"

DEFAULT_SCHEMA = {
    "id": "unit_id",
    "time": "time",
    "variable": "variable",
    "value": "value",
    "exposure": "exposure_time",
    "categorical": [],
    "never": "",
}


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    exposure_time: float
    categorical_covariates: dict
    continuous_covariates: dict
    outcomes: dict


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Rectangular unit-by-time panel.

    ``categorical`` arrays hold interned label strings (``None`` where a
    post-exposure value is unrecorded); ``continuous`` arrays may carry NaN
    after a unit's exposure time.
    """

    unit_ids: tuple
    times: np.ndarray
    exposure: np.ndarray
    outcomes: dict
    continuous: dict = field(default_factory=dict)
    categorical: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def T(self) -> int:
        return len(self.times)

    @property
    def outcome_names(self) -> list:
        return list(self.outcomes)

    @property
    def index(self) -> dict:
        # cached lazily; frozen dataclass so go through object.__setattr__
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = {u: i for i, u in enumerate(self.unit_ids)}
            object.__setattr__(self, "_index", idx)
        return idx

    def col(self, t: int) -> int:
        """Array column for (1-based) time ``t``."""
        return int(t) - 1

    def unit(self, unit_id) -> UnitRecord:
        i = self.index[unit_id]
        times = [int(t) for t in self.times]
        cat = {}
        for name, arr in self.categorical.items():
            row = arr[i]
            if all(v == row[0] for v in row):
                cat[name] = row[0]
            else:
                cat[name] = {t: row[k] for k, t in enumerate(times)}
        cont = {n: {t: float(a[i, k]) for k, t in enumerate(times)} for n, a in self.continuous.items()}
        outs = {n: {t: float(a[i, k]) for k, t in enumerate(times)} for n, a in self.outcomes.items()}
        return UnitRecord(unit_id, float(self.exposure[i]), cat, cont, outs)

    @property
    def units(self) -> list:
        return [self.unit(u) for u in self.unit_ids]

    def covariate_names(self) -> list:
        return list(self.categorical) + list(self.continuous)


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def __bool__(self):
        # truthy when the panel is clean
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


def validate_panel(d: PanelDataset) -> ValidationReport:
    """List every violated panel invariant; an empty report means the panel is valid."""
    out = []
    times = np.asarray(d.times)
    if times.size == 0:
        out.append("panel has no time points")
    else:
        diffs = np.diff(times)
        for k in np.flatnonzero(diffs <= 0):
            out.append(f"time index not strictly increasing at {times[k]} -> {times[k + 1]}")
        for k in np.flatnonzero(diffs > 1):
            out.append(f"gap in time index between t={times[k]} and t={times[k + 1]}")
        if times[0] != 1:
            out.append(f"time index starts at {times[0]}, expected 1")
    seen = {}
    for i, u in enumerate(d.unit_ids):
        if u in seen:
            out.append(f"duplicate unit id {u!r} at rows {seen[u]} and {i}")
        else:
            seen[u] = i
    shape = (d.n_units, d.T)
    for name, arr in d.outcomes.items():
        if arr.shape != shape:
            out.append(f"outcome {name!r} has shape {arr.shape}, expected {shape}")
            continue
        for i, k in zip(*np.nonzero(np.isnan(arr))):
            out.append(f"missing outcome {name!r} for unit {d.unit_ids[i]!r} at t={times[k]}")
    T = d.T
    for i, z in enumerate(d.exposure):
        if not (z == NEVER or (float(z).is_integer() and 1 <= z <= T)):
            out.append(f"exposure time {z} of unit {d.unit_ids[i]!r} outside 1..{T}")
    for name, arr in d.continuous.items():
        if arr.shape != shape:
            out.append(f"covariate {name!r} has shape {arr.shape}, expected {shape}")
            continue
        pre = times[None, :] < np.asarray(d.exposure)[:, None]
        for i, k in zip(*np.nonzero(np.isnan(arr) & pre)):
            out.append(f"missing covariate {name!r} for unit {d.unit_ids[i]!r} at t={times[k]} before exposure")
    return ValidationReport(out)


# ---------------------------------------------------------------------------
# delimited-text I/O


def _load_schema(schema) -> dict:
    if schema is None:
        raw = {}
    elif isinstance(schema, Mapping):
        raw = dict(schema)
    else:
        text = Path(schema).read_text(encoding="utf-8")
        raw = yaml.safe_load(text) or {}
    unknown = set(raw) - set(DEFAULT_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
    out = dict(DEFAULT_SCHEMA)
    out.update(raw)
    out["categorical"] = list(out["categorical"] or [])
    return out


def _is_blank(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v)) or str(v).strip() == ""


def load_panel(outcome_file, covariate_file, exposure_file, schema=None) -> PanelDataset:
    """Read three long-format CSV files into a :class:`PanelDataset`.

    Unit order follows the exposure file. Raw times are shifted so the first
    observed time becomes 1.
    """
    sc = _load_schema(schema)
    cid, ctime, cvar, cval, cexp = sc["id"], sc["time"], sc["variable"], sc["value"], sc["exposure"]
    never_tokens = {"", str(sc["never"]).strip().lower(), "never", "inf"}

    ex = pd.read_csv(exposure_file, dtype=str, keep_default_na=False)
    unit_ids = []
    raw_exposure = {}
    for uid, z in zip(ex[cid], ex[cexp]):
        if uid in raw_exposure:
            raise DuplicateRow(uid, None, "exposure")
        raw_exposure[uid] = z
        unit_ids.append(uid)
    index = {u: i for i, u in enumerate(unit_ids)}

    yo = pd.read_csv(outcome_file, dtype={cid: str, cvar: str}, float_precision="round_trip")
    if yo.empty:
        raise MissingData(unit_ids[0] if unit_ids else None, None, "outcome")
    raw_times = yo[ctime].astype(int)
    t0, t1 = int(raw_times.min()), int(raw_times.max())
    T = t1 - t0 + 1
    names = list(dict.fromkeys(yo[cvar]))
    outcomes = {}
    for name in names:
        arr = np.full((len(unit_ids), T), np.nan)
        sub = yo[yo[cvar] == name]
        for uid, t, v in zip(sub[cid], sub[ctime].astype(int), sub[cval].astype(float)):
            if uid not in index:
                raise MissingData(uid, None, "exposure")
            k = t - t0
            if not np.isnan(arr[index[uid], k]):
                raise DuplicateRow(uid, t, name)
            arr[index[uid], k] = v
        outcomes[name] = arr

    exposure = np.empty(len(unit_ids))
    for uid, z in raw_exposure.items():
        if _is_blank(z) or str(z).strip().lower() in never_tokens:
            exposure[index[uid]] = NEVER
            continue
        try:
            zt = int(str(z).strip()) - t0 + 1
        except ValueError:
            raise BadExposure(uid, z) from None
        if not 1 <= zt <= T:
            raise BadExposure(uid, z)
        exposure[index[uid]] = zt

    for name in names:
        arr = outcomes[name]
        missing = np.argwhere(np.isnan(arr))
        if missing.size:
            i, k = missing[0]
            raise MissingData(unit_ids[i], int(k) + t0, name)

    categorical, continuous = {}, {}
    if covariate_file is not None:
        cv = pd.read_csv(covariate_file, dtype=str, keep_default_na=False)
        cat_names = set(sc["categorical"])
        for name in dict.fromkeys(cv[cvar]):
            sub = cv[cv[cvar] == name]
            is_cat = name in cat_names
            arr = np.full((len(unit_ids), T), None, dtype=object) if is_cat else np.full((len(unit_ids), T), np.nan)
            filled = np.zeros((len(unit_ids), T), dtype=bool)
            for uid, t, v in zip(sub[cid], sub[ctime], sub[cval]):
                if uid not in index:
                    raise MissingData(uid, None, "exposure")
                i = index[uid]
                cols = range(T) if _is_blank(t) else [int(t) - t0]
                if _is_blank(v):
                    continue
                val = sys.intern(v) if is_cat else float(v)
                for k in cols:
                    if filled[i, k]:
                        raise DuplicateRow(uid, k + t0, name)
                    arr[i, k] = val
                    filled[i, k] = True
            pre = np.arange(1, T + 1)[None, :] < exposure[:, None]
            gap = np.argwhere(~filled & pre)
            if gap.size:
                i, k = gap[0]
                raise MissingData(unit_ids[i], int(k) + t0, name)
            (categorical if is_cat else continuous)[name] = arr

    return PanelDataset(
        unit_ids=tuple(unit_ids),
        times=np.arange(1, T + 1),
        exposure=exposure,
        outcomes=outcomes,
        continuous=continuous,
        categorical=categorical,
    )


def write_panel(d: PanelDataset, directory) -> dict:
    """Write ``d`` as long-format CSV files plus a schema file; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    times = [int(t) for t in d.times]
    paths = {
        "outcomes": directory / "outcomes.csv",
        "covariates": directory / "covariates.csv",
        "exposures": directory / "exposures.csv",
        "schema": directory / "schema.yaml",
    }
    rows = []
    for name, arr in d.outcomes.items():
        for i, uid in enumerate(d.unit_ids):
            for k, t in enumerate(times):
                rows.append((uid, t, name, repr(float(arr[i, k]))))
    pd.DataFrame(rows, columns=["unit_id", "time", "variable", "value"]).to_csv(paths["outcomes"], index=False)

    rows = []
    for name, arr in d.categorical.items():
        for i, uid in enumerate(d.unit_ids):
            row = arr[i]
            if all(v == row[0] for v in row) and row[0] is not None:
                rows.append((uid, "", name, row[0]))
            else:
                rows.extend((uid, t, name, "" if row[k] is None else row[k]) for k, t in enumerate(times))
    for name, arr in d.continuous.items():
        for i, uid in enumerate(d.unit_ids):
            rows.extend(
                (uid, t, name, "" if np.isnan(arr[i, k]) else repr(float(arr[i, k]))) for k, t in enumerate(times)
            )
    pd.DataFrame(rows, columns=["unit_id", "time", "variable", "value"]).to_csv(paths["covariates"], index=False)

    ex = ["" if z == NEVER else str(int(z)) for z in d.exposure]
    pd.DataFrame({"unit_id": list(d.unit_ids), "exposure_time": ex}).to_csv(paths["exposures"], index=False)

    schema = dict(DEFAULT_SCHEMA, categorical=list(d.categorical))
    paths["schema"].write_text(yaml.safe_dump(schema, sort_keys=False), encoding="utf-8")
    return paths


def read_panel_dir(directory) -> PanelDataset:
    directory = Path(directory)
    return load_panel(
        directory / "outcomes.csv",
        directory / "covariates.csv",
        directory / "exposures.csv",
        directory / "schema.yaml",
    )


# ---------------------------------------------------------------------------
# JSON tree


def _nan_to_none(a):
    return [[None if (isinstance(v, float) and math.isnan(v)) else v for v in row] for row in a.tolist()]


def panel_to_dict(d: PanelDataset) -> dict:
    return {
        "version": PANEL_VERSION,
        "unit_ids": list(d.unit_ids),
        "times": [int(t) for t in d.times],
        "exposure": [None if z == NEVER else int(z) for z in d.exposure],
        "outcomes": {n: _nan_to_none(a) for n, a in d.outcomes.items()},
        "continuous": {n: _nan_to_none(a) for n, a in d.continuous.items()},
        "categorical": {n: a.tolist() for n, a in d.categorical.items()},
    }


def panel_from_dict(obj: dict) -> PanelDataset:
    if obj.get("version") != PANEL_VERSION:
        raise ConfigError(f"unsupported panel version {obj.get('version')!r}")

    def num(a):
        return np.array([[np.nan if v is None else v for v in row] for row in a], dtype=float)

    def cat(a):
        arr = np.empty((len(a), len(a[0]) if a else 0), dtype=object)
        for i, row in enumerate(a):
            arr[i, :] = [None if v is None else sys.intern(v) for v in row]
        return arr

    return PanelDataset(
        unit_ids=tuple(obj["unit_ids"]),
        times=np.asarray(obj["times"], dtype=int),
        exposure=np.array([NEVER if z is None else float(z) for z in obj["exposure"]]),
        outcomes={n: num(a) for n, a in obj["outcomes"].items()},
        continuous={n: num(a) for n, a in obj["continuous"].items()},
        categorical={n: cat(a) for n, a in obj["categorical"].items()},
    )


def save_panel_json(d: PanelDataset, path) -> None:
    Path(path).write_text(json.dumps(panel_to_dict(d)), encoding="utf-8")


def load_panel_json(path) -> PanelDataset:
    return panel_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class NoiseSpec:
    family: str = "normal"  # normal | student_t | none
    scale: float = 1.0
    risk_slope: float = 0.0  # sd multiplier per unit of (risk_score - 1)
    df: float = 5.0


@dataclass(frozen=True)
class HazardSpec:
    intercept: float = -6.5
    age: float = 0.0  # per decade, centred at 40
    risk_score: float = 0.3  # per unit, centred at 1
    female: float = -0.5
    gamma: float = 0.0  # coefficient on the unobserved u


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for :func:`synth_generate`.

    Outcomes follow ``y(inf) = mu_j + alpha[t, stratum] + beta[cohort] + eps``;
    after exposure a unit gains ``effect`` plus ``effect_by_category`` terms.
    """

    n_units: int = 4000
    t_max: int = 36
    baseline_mean: float = 0.0
    baseline_sd: float = 1.0
    time_shock_sd: float = 0.5
    cohort_shock_sd: float = 0.5
    noise: NoiseSpec = NoiseSpec()
    hazard: HazardSpec = HazardSpec()
    effect: float = 0.0
    effect_by_category: dict = field(default_factory=dict)
    outcome_names: tuple = ("y",)
    check_variance: bool = True
    seed: int = 0
    outcome_seed: Optional[int] = None  # redraws outcomes only; covariates and exposures follow ``seed``

    def validate(self) -> None:
        if self.n_units < 1 or self.t_max < 1:
            raise ConfigError("n_units and t_max must be positive")
        if self.noise.family not in ("normal", "student_t", "none"):
            raise ConfigError(f"unknown noise family {self.noise.family!r}")
        if self.check_variance and (self.noise.family == "none" or self.noise.scale <= 0):
            raise ConfigError("zero-variance noise requested while check_variance is enabled")
        if min(self.baseline_sd, self.time_shock_sd, self.cohort_shock_sd) < 0:
            raise ConfigError("standard deviations must be non-negative")


SEXES = ("F", "M")
PLANS = ("HMO", "PPO", "CDHP")


def hazard_logit(h: HazardSpec, age, risk, female, u=0.0):
    """Log-odds of exposure at t among units still at risk."""
    return h.intercept + h.age * (age - 40.0) / 10.0 + h.risk_score * (risk - 1.0) + h.female * female + h.gamma * u


def synth_generate(cfg: SynthConfig, exposure_override: Optional[Mapping] = None) -> PanelDataset:
    """Draw a synthetic panel from ``cfg``.

    Every random quantity comes from its own child stream and is drawn for
    the full unit-by-time grid, so overriding a unit's exposure time (an
    intervention on ``Z``) leaves all of its pre-exposure values untouched.
    """
    cfg.validate()
    n, T = cfg.n_units, cfg.t_max
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(8)]
    r_cov, r_u, r_haz, r_mu, r_alpha, r_beta, r_noise, r_fx = streams
    if cfg.outcome_seed is not None:
        r_mu, r_alpha, r_beta, r_noise = (
            np.random.default_rng(s) for s in np.random.SeedSequence(cfg.outcome_seed).spawn(4)
        )

    sex_idx = r_cov.integers(0, 2, n)
    plan_idx = r_cov.integers(0, 3, n)
    age0 = r_cov.uniform(18.0, 65.0, n)
    risk0 = np.exp(r_cov.normal(0.0, 0.5, n))
    drift = r_cov.normal(0.0, 0.02, (n, T))
    ages = age0[:, None] + np.arange(T)[None, :] / 12.0
    risk = np.maximum(risk0[:, None] + np.cumsum(drift, axis=1), 0.05)
    female = (sex_idx == 0).astype(float)
    u = r_u.normal(0.0, 1.0, n)

    unif = r_haz.uniform(size=(n, T))
    p = 1.0 / (1.0 + np.exp(-hazard_logit(cfg.hazard, ages, risk, female[:, None], u[:, None])))
    hit = unif < p
    first = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, 0)
    natural = np.where(first > 0, first.astype(float), NEVER)
    exposure = natural.copy()
    ids = tuple(f"U{j:06d}" for j in range(n))
    if exposure_override:
        pos = {u_: j for j, u_ in enumerate(ids)}
        for uid, z in exposure_override.items():
            exposure[pos[uid]] = NEVER if z is None else float(z)

    stratum = sex_idx * len(PLANS) + plan_idx
    mu = r_mu.normal(cfg.baseline_mean, cfg.baseline_sd, n)
    cohort = np.where(np.isinf(natural), 0, natural).astype(int)
    t_idx = np.arange(1, T + 1)
    outcomes = {}
    for name in cfg.outcome_names:
        alpha = r_alpha.normal(0.0, cfg.time_shock_sd, (2 * len(PLANS), T))
        beta = r_beta.normal(0.0, cfg.cohort_shock_sd, T + 1)
        if cfg.noise.family == "none":
            eps = np.zeros((n, T))
        else:
            if cfg.noise.family == "normal":
                base = r_noise.normal(0.0, 1.0, (n, T))
            else:
                base = r_noise.standard_t(cfg.noise.df, (n, T))
            sd = cfg.noise.scale * np.maximum(1.0 + cfg.noise.risk_slope * (risk - 1.0), 0.1)
            eps = base * sd
        y = mu[:, None] + alpha[stratum] + beta[cohort][:, None] + eps
        fx = np.full(n, cfg.effect)
        cov_arrays = {"sex": np.array(SEXES)[sex_idx], "plan": np.array(PLANS)[plan_idx]}
        for cov, mapping in cfg.effect_by_category.items():
            labels = cov_arrays[cov]
            for label, extra in mapping.items():
                fx = fx + extra * (labels == label)
        post = t_idx[None, :] >= exposure[:, None]
        outcomes[name] = y + fx[:, None] * post

    sex_lab = np.array([sys.intern(s) for s in SEXES], dtype=object)[sex_idx]
    plan_lab = np.array([sys.intern(s) for s in PLANS], dtype=object)[plan_idx]
    categorical = {
        "sex": np.repeat(sex_lab[:, None], T, axis=1),
        "plan": np.repeat(plan_lab[:, None], T, axis=1),
    }
    continuous = {"age": ages, "risk_score": risk}
    return PanelDataset(
        unit_ids=ids,
        times=t_idx,
        exposure=exposure,
        outcomes=outcomes,
        continuous=continuous,
        categorical=categorical,
    )


def synth_latent(cfg: SynthConfig) -> np.ndarray:
    """The unobserved covariate ``u`` drawn by :func:`synth_generate` for ``cfg``."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(8)]
    return streams[1].normal(0.0, 1.0, cfg.n_units)
