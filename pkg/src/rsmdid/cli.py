"""Command-line front end.

Every subcommand reads a YAML run configuration (``--config``), lets a few
flags override it, and writes into a fixed layout under the output
directory::

    panel/                  generated panel (outcomes, covariates, exposures, schema)
    design.csv              matched sets, one row per unit
    design_audit.json       matching audit and settings ("design/v1")
    balance.csv             ASAMD per covariate
    estimates.csv           point estimate, p-value, CI and Gamma* per outcome and horizon
    sensitivity.csv         worst-case p-values over a Gamma grid
    submax_<outcome>_<horizon>.csv
    discover/               trees, leaf summaries, confirmation tables, r2.csv
    power.csv, power.json   simulated power ("power/v1")
    manifest.json           command, seed and files written ("run/v1")

Errors exit nonzero and print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import pandas as pd
import yaml

from . import discovery, inference, matching, panel_data, simulation, submax
from .cart import TreeParams
from .errors import ConfigError, RsmdidError

log = logging.getLogger("rsmdid")

RUN_VERSION = "run/v1"

# allowed keys per section; None marks a leaf value
SCHEMA = {
    "seed": None,
    "threads": None,
    "out": None,
    "input": {"panel_dir": None, "outcomes": None, "covariates": None, "exposures": None, "schema": None},
    "generate": {
        "n_units": None,
        "t_max": None,
        "baseline_mean": None,
        "baseline_sd": None,
        "time_shock_sd": None,
        "cohort_shock_sd": None,
        "effect": None,
        "effect_by_category": None,
        "outcome_names": None,
        "check_variance": None,
        "noise": {"family": None, "scale": None, "risk_slope": None, "df": None},
        "hazard": {"intercept": None, "age": None, "risk_score": None, "female": None, "gamma": None},
    },
    "match": {"exact": None, "calipers": None, "max_controls": None, "min_controls": None},
    "outcomes": None,
    "horizons": None,
    "alpha": None,
    "alpha1": None,
    "gamma": None,
    "gammas": None,
    "submax": {"group_by": None, "n_draws": None, "two_sided": None, "closure": None},
    "discovery": {
        "covariates": None,
        "fraction": None,
        "min_leaf": None,
        "max_depth": None,
        "cp": None,
        "n_draws": None,
        "two_sided": None,
    },
    "simulation": {
        "replications": None,
        "n_treated": None,
        "set_size_probs": None,
        "scenarios": None,
        "splits": None,
        "n_draws": None,
        "alpha": None,
        "alpha1": None,
        "min_leaf": None,
        "max_depth": None,
        "cp": None,
        "two_sided": None,
        "checkpoint": None,
    },
}

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "out",
    "outcomes": None,
    "horizons": ["month", "year"],
    "alpha": 0.05,
    "alpha1": None,
    "gamma": 1.0,
    "gammas": [1.0, 1.5, 2.0, 4.0, 10.0],
}


def _check_keys(doc, schema, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    for key, val in doc.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(schema[key], dict) and val is not None:
            _check_keys(val, schema[key], where)


def load_config(path=None) -> dict:
    """Read and validate a run configuration; unknown keys are rejected."""
    doc = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    _check_keys(doc, SCHEMA)
    cfg = dict(DEFAULTS)
    cfg.update(doc)
    return cfg


def _apply_flags(cfg: dict, args) -> dict:
    for key in ("seed", "threads", "out", "gamma", "alpha", "alpha1"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "horizon", None):
        cfg["horizons"] = [args.horizon]
    if getattr(args, "outcome", None):
        cfg["outcomes"] = [args.outcome]
    return cfg


class Run:
    """Output directory bookkeeping and the shared inputs of the stages."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        self._panel = None

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def panel(self) -> panel_data.PanelDataset:
        if self._panel is None:
            inp = self.cfg.get("input") or {}
            if inp.get("outcomes"):
                self._panel = panel_data.load_panel(
                    inp["outcomes"], inp.get("covariates"), inp["exposures"], inp.get("schema")
                )
            else:
                self._panel = panel_data.read_panel_dir(inp.get("panel_dir") or self.out / "panel")
        return self._panel

    def design(self) -> matching.MatchedDesign:
        csv, side = self.out / "design.csv", self.out / "design_audit.json"
        if not csv.exists():
            raise ConfigError(f"no design at {csv}; run the match command first")
        return matching.read_design(csv, side)

    def outcomes(self) -> list:
        return list(self.cfg.get("outcomes") or self.panel().outcome_names)

    def horizons(self) -> list:
        return [inference.Horizon.parse(h) for h in self.cfg["horizons"]]

    def finish(self) -> None:
        manifest = {"version": RUN_VERSION, "command": self.command, "seed": self.cfg["seed"], "files": self.files}
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(run: Run) -> None:
    g = dict(run.cfg.get("generate") or {})
    noise = panel_data.NoiseSpec(**(g.pop("noise", None) or {}))
    hazard = panel_data.HazardSpec(**(g.pop("hazard", None) or {}))
    if "outcome_names" in g:
        g["outcome_names"] = tuple(g["outcome_names"])
    cfg = panel_data.SynthConfig(noise=noise, hazard=hazard, seed=int(run.cfg["seed"]), **g)
    d = panel_data.synth_generate(cfg)
    for path in panel_data.write_panel(d, run.out / "panel").values():
        run.files.append(f"panel/{Path(path).name}")


def _match_spec(cfg: dict) -> matching.MatchSpec:
    m = cfg.get("match") or {}
    calipers = m.get("calipers") or {}
    return matching.MatchSpec(
        tuple(m.get("exact") or ()),
        tuple(calipers.items()),
        int(m.get("max_controls", 5)),
        int(m.get("min_controls", 1)),
    )


def _write_balance(run: Run, design, d) -> None:
    report = matching.compute_asamd(design, d)
    report.to_frame().to_csv(run.path("balance.csv"), index=False)


def cmd_match(run: Run) -> None:
    d = run.panel()
    design = matching.run_risk_set_matching(d, _match_spec(run.cfg))
    matching.write_design(design, d, run.path("design.csv"), run.path("design_audit.json"))
    _write_balance(run, design, d)
    log.info("%d matched sets, %d infeasible", len(design), len(design.audit.infeasible))


def cmd_balance(run: Run) -> None:
    _write_balance(run, run.design(), run.panel())


def cmd_estimate(run: Run) -> None:
    d, design = run.panel(), run.design()
    results = [
        inference.estimate_effect(design, d, o, h, run.cfg["alpha"]) for o in run.outcomes() for h in run.horizons()
    ]
    inference.write_results(results, run.path("estimates.csv"))


def cmd_sensitivity(run: Run) -> None:
    d, design = run.panel(), run.design()
    rows = []
    for o in run.outcomes():
        for h in run.horizons():
            ds = inference.collect_deltas(design, d, o, h)
            gs = inference.gamma_star_from_deltas(ds, run.cfg["alpha"])
            for g in run.cfg["gammas"]:
                rows.append(
                    {
                        "outcome": o,
                        "horizon": h.value,
                        "gamma": float(g),
                        "p_value": inference.pvalue_from_deltas(ds, 0.0, float(g), "two-sided"),
                        "gamma_star": inference.format_gamma(gs),
                    }
                )
    pd.DataFrame(rows, columns=["outcome", "horizon", "gamma", "p_value", "gamma_star"]).to_csv(
        run.path("sensitivity.csv"), index=False
    )


def cmd_submax(run: Run) -> None:
    d, design = run.panel(), run.design()
    s = run.cfg.get("submax") or {}
    by = s.get("group_by")
    if not by:
        raise ConfigError("submax.group_by must name a covariate defining the groups")
    feats = discovery.set_features(design, d, [by])
    levels = sorted(feats[by].unique(), key=str)
    groups = {sid: levels.index(v) for sid, v in feats[by].items()}
    cmat = submax.ComparisonMatrix.identity(len(levels), with_total=True)
    cmat = submax.ComparisonMatrix(cmat.c, tuple(f"{by}={lv}" for lv in levels) + cmat.labels[len(levels):])
    for o in run.outcomes():
        for h in run.horizons():
            res = submax.minmax_test(
                design,
                d,
                o,
                h,
                groups,
                cmat,
                run.cfg["alpha"],
                run.cfg["alpha1"],
                float(run.cfg["gamma"]),
                n_draws=int(s.get("n_draws", submax.DEFAULT_DRAWS)),
                seed=int(run.cfg["seed"]),
                two_sided=bool(s.get("two_sided", False)),
                closure=s.get("closure", "shortcut"),
            )
            submax.write_submax(res, run.path(f"submax_{o}_{h.value}.csv"))


def _tree_params(section: dict) -> TreeParams:
    base = TreeParams()
    return TreeParams(
        int(section.get("min_leaf", base.min_leaf)),
        int(section.get("max_depth", base.max_depth)),
        float(section.get("cp", base.cp)),
    )


def cmd_discover(run: Run) -> None:
    d, design = run.panel(), run.design()
    s = run.cfg.get("discovery") or {}
    covariates = s.get("covariates") or d.covariate_names()
    plan = discovery.SplitPlan(float(s.get("fraction", 0.25)), int(run.cfg["seed"]))
    disc, test = discovery.split_design(design, plan)
    params = _tree_params(s)
    # sets missing some covariates get their own tree on the covariates they have
    strata = discovery.availability_strata(discovery.set_features(design, d, covariates))
    r2_rows = []
    for name, (ids, cols) in strata.items():
        members = set(ids)
        disc_s = disc.subset([i for i in disc.set_ids if i in members])
        test_s = test.subset([i for i in test.set_ids if i in members])
        if len(disc_s) == 0 or len(test_s) == 0:
            log.warning("stratum %s has an empty split side; skipped", name)
            continue
        suffix = "" if len(strata) == 1 else f"_{name}"
        for o in run.outcomes():
            for h in run.horizons():
                _discover_one(run, d, disc_s, test_s, o, h, cols, params, s, f"{o}_{h.value}{suffix}")
                r2_rows.append((o, h, discovery.r2_bounds(design.subset(ids), d, o, h, cols)))
    discovery.write_r2(r2_rows, run.path("discover/r2.csv"))


def _discover_one(run: Run, d, disc, test, o, h, covariates, params, s, tag) -> None:
    tree = discovery.fit_cart(disc, d, o, h, covariates, params)
    sub = discovery.extract_groups(tree)
    ds = inference.collect_deltas(test, d, o, h)
    kept = test.subset(ds.set_ids.tolist())
    labels = sub.labels_for(discovery.set_features(kept, d, covariates).loc[list(ds.set_ids)])
    res = discovery.confirm_from_deltas(
        ds,
        labels,
        sub.cmat,
        run.cfg["alpha"],
        run.cfg["alpha1"],
        float(run.cfg["gamma"]),
        two_sided=bool(s.get("two_sided", True)),
        n_draws=int(s.get("n_draws", submax.DEFAULT_DRAWS)),
        seed=int(run.cfg["seed"]),
    )
    discovery.annotate_tree(sub, res)
    tree.to_json(run.path(f"discover/tree_{tag}.json"))
    run.path(f"discover/tree_{tag}.txt").write_text(tree.to_text() + "\n", encoding="utf-8")
    submax.write_submax(res, run.path(f"discover/submax_{tag}.csv"))
    pd.DataFrame(
        [lf.row() for lf in res.extras["leaves"]],
        columns=["leaf", "n_sets", "estimate", "ci_lower", "ci_upper", "gamma_star", "rejected"],
    ).to_csv(run.path(f"discover/leaves_{tag}.csv"), index=False)


def cmd_simulate(run: Run) -> None:
    s = dict(run.cfg.get("simulation") or {})
    base = simulation.SimScenario(
        replications=int(s.get("replications", 1000)),
        n_treated=int(s.get("n_treated", 2000)),
        set_size_probs=tuple(s.get("set_size_probs", simulation.DEFAULT_SET_SIZE_PROBS)),
        alpha=float(s.get("alpha", run.cfg["alpha"])),
        alpha1=s.get("alpha1", run.cfg["alpha1"]),
        seed=int(run.cfg["seed"]),
        n_draws=int(s.get("n_draws", 100_000)),
        two_sided=bool(s.get("two_sided", True)),
        tree=_tree_params(s),
    )
    scenarios = {k: tuple(v) for k, v in (s.get("scenarios") or simulation.SCENARIOS).items()}
    splits = [tuple(x) for x in (s.get("splits") or simulation.SPLITS)]
    grid = simulation.scenario_grid(base, scenarios, splits)
    report = simulation.run_power_study(grid, threads=int(run.cfg["threads"]), checkpoint=s.get("checkpoint"))
    report.to_csv(run.path("power.csv"))
    report.to_json(run.path("power.json"))
    print(report.table().to_string(float_format=lambda v: f"{v:.2f}"))


COMMANDS = {
    "generate": (cmd_generate, "simulate a staggered-exposure panel"),
    "match": (cmd_match, "risk set matching with profile calipers"),
    "balance": (cmd_balance, "covariate balance of an existing design"),
    "estimate": (cmd_estimate, "DiD estimates, tests, intervals and Gamma*"),
    "sensitivity": (cmd_sensitivity, "worst-case p-values over a Gamma grid"),
    "submax": (cmd_submax, "effect modification across covariate-defined groups"),
    "discover": (cmd_discover, "split, tree and confirm discovered subgroups"),
    "simulate": (cmd_simulate, "power study of the discovery pipeline"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsmdid", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--gamma", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--alpha1", type=float)
        p.add_argument("--horizon", choices=["month", "year"])
        p.add_argument("--outcome")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        run = Run(cfg, args.command)
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", RuntimeWarning)
            COMMANDS[args.command][0](run)
        run.finish()
    except RsmdidError as exc:
        print(json.dumps({"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except (OSError, yaml.YAMLError) as exc:
        print(json.dumps({"error": type(exc).__name__, "exit_code": 5, "message": str(exc)}), file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
