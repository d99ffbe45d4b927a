import json
import shutil

import pandas as pd
import pytest
import yaml

from rsmdid.cli import SCHEMA, build_parser, load_config, main
from rsmdid.errors import ConfigError
from rsmdid.matching import compute_asamd, read_design
from rsmdid.panel_data import read_panel_dir

BASE = {
    "seed": 11,
    "generate": {"n_units": 1500, "t_max": 24, "hazard": {"intercept": -4.5}},
    "match": {"exact": ["sex", "plan"], "calipers": {"age": 3.0, "risk_score": 0.3}},
    "horizons": ["month"],
    "submax": {"group_by": "plan", "n_draws": 100_000},
    "discovery": {"covariates": ["sex", "age"], "fraction": 0.3, "n_draws": 100_000},
}


def write_config(path, **override):
    cfg = {**BASE, **override}
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    """Panel where exposure adds 3 units for men and 6 for women, generated and matched once."""
    out = tmp_path_factory.mktemp("planted")
    gen = dict(BASE["generate"], effect=3.0, effect_by_category={"sex": {"F": 3.0}})
    cfg = write_config(out / "run.yaml", generate=gen, out=str(out))
    assert run("generate", "--config", cfg) == 0
    assert run("match", "--config", cfg) == 0
    return out, cfg


@pytest.fixture(scope="module")
def null(tmp_path_factory):
    out = tmp_path_factory.mktemp("null")
    cfg = write_config(out / "run.yaml", out=str(out))
    assert run("generate", "--config", cfg) == 0
    assert run("match", "--config", cfg) == 0
    return out, cfg


class TestConfig:
    def test_unknown_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", bogus=1)
        with pytest.raises(ConfigError):
            load_config(cfg)

    def test_unknown_nested_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", match={"exact": ["sex"], "caliper": {}})
        with pytest.raises(ConfigError, match="match.caliper"):
            load_config(cfg)

    def test_exit_code_and_error_line(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", bogus=1)
        assert run("generate", "--config", cfg) == 2
        line = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert line["error"] == "ConfigError" and line["exit_code"] == 2

    def test_missing_file(self, tmp_path, capsys):
        assert run("generate", "--config", tmp_path / "nope.yaml") == 5
        assert json.loads(capsys.readouterr().err.strip())["exit_code"] == 5

    def test_missing_design(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", out=str(tmp_path / "o"))
        assert run("generate", "--config", cfg) == 0
        assert run("estimate", "--config", cfg) == 2
        assert "match command" in json.loads(capsys.readouterr().err)["message"]

    def test_flags(self):
        args = build_parser().parse_args(
            ["estimate", "--seed", "3", "--gamma", "2", "--alpha1", "0.01", "--horizon", "year", "--outcome", "y"]
        )
        assert (args.seed, args.gamma, args.alpha1, args.horizon, args.outcome) == (3, 2.0, 0.01, "year", "y")

    def test_schema_covers_sections(self):
        assert {"input", "generate", "match", "submax", "discovery", "simulation"} <= set(SCHEMA)


class TestGenerateMatch:
    def test_seed_determinism(self, tmp_path):
        for name in ("a", "b"):
            assert run("generate", "--config", write_config(tmp_path / f"{name}.yaml"), "--out", tmp_path / name) == 0
        for f in (tmp_path / "a" / "panel").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "panel" / f.name).read_bytes()
        assert run("generate", "--config", tmp_path / "a.yaml", "--out", tmp_path / "c", "--seed", "12") == 0
        a = (tmp_path / "a" / "panel" / "outcomes.csv").read_bytes()
        assert a != (tmp_path / "c" / "panel" / "outcomes.csv").read_bytes()

    def test_balance_matches_library(self, null):
        out, _ = null
        d = read_panel_dir(out / "panel")
        design = read_design(out / "design.csv", out / "design_audit.json")
        frame = pd.read_csv(out / "balance.csv")
        expected = compute_asamd(design, d).to_frame()
        pd.testing.assert_frame_equal(frame, expected, check_dtype=False)

    def test_audit(self, null):
        out, _ = null
        audit = json.loads((out / "design_audit.json").read_text())
        assert audit["version"] == "design/v1"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["version"] == "run/v1" and manifest["seed"] == 11

    def test_rerun_identical(self, null, tmp_path):
        out, cfg = null
        copy = tmp_path / "again"
        shutil.copytree(out / "panel", copy / "panel")
        assert run("match", "--config", cfg, "--out", copy) == 0
        assert (copy / "design.csv").read_bytes() == (out / "design.csv").read_bytes()


class TestEstimate:
    def test_columns_and_cap(self, planted):
        out, cfg = planted
        assert run("estimate", "--config", cfg) == 0
        frame = pd.read_csv(out / "estimates.csv", keep_default_na=False, dtype={"gamma_star": str})
        assert list(frame.columns) == ["outcome", "horizon", "estimate", "p_value", "ci_lower", "ci_upper", "gamma_star"]
        assert frame.loc[0, "gamma_star"] == ">10.00"

    def test_not_applicable(self, null):
        out, cfg = null
        assert run("estimate", "--config", cfg) == 0
        frame = pd.read_csv(out / "estimates.csv", keep_default_na=False, dtype={"gamma_star": str})
        assert frame.loc[0, "gamma_star"] == "NA"
        assert frame.loc[0, "p_value"] > 0.05

    def test_sensitivity(self, planted):
        out, cfg = planted
        assert run("sensitivity", "--config", cfg) == 0
        frame = pd.read_csv(out / "sensitivity.csv", keep_default_na=False, dtype={"gamma_star": str})
        assert frame["gamma"].tolist() == [1.0, 1.5, 2.0, 4.0, 10.0]
        assert frame["p_value"].is_monotonic_increasing


class TestSubmaxDiscover:
    def test_submax(self, planted):
        out, cfg = planted
        assert run("submax", "--config", cfg) == 0
        frame = pd.read_csv(out / "submax_y_month.csv")
        assert frame["comparison"].tolist() == ["plan=CDHP", "plan=HMO", "plan=PPO", "all", "global"]
        assert list(frame.columns) == ["comparison", "deviate", "kappa", "rejected", "gamma"]

    def test_submax_needs_groups(self, null, tmp_path):
        out, _ = null
        cfg = write_config(tmp_path / "c.yaml", out=str(out), submax={})
        assert run("submax", "--config", cfg) == 2

    def test_discover_flags_planted(self, planted):
        out, cfg = planted
        assert run("discover", "--config", cfg) == 0
        tree = json.loads((out / "discover" / "tree_y_month.json").read_text())
        assert tree["version"] == "tree/v1"
        assert tree["root"]["split"]["covariate"] == "sex"
        leaves = pd.read_csv(out / "discover" / "leaves_y_month.csv", keep_default_na=False)
        flagged = leaves[leaves["rejected"]]["leaf"].tolist()
        assert any("sex" in lb for lb in flagged)
        r2 = pd.read_csv(out / "discover" / "r2.csv")
        assert list(r2.columns) == ["outcome", "horizon", "lower", "upper"]
        assert (out / "discover" / "tree_y_month.txt").read_text().startswith("root [")

    def test_seed_flag_reproduces(self, planted, tmp_path):
        out, cfg = planted
        copy = tmp_path / "again"
        shutil.copytree(out, copy, ignore=shutil.ignore_patterns("discover"))
        assert run("discover", "--config", cfg, "--out", copy) == 0
        for name in ("submax_y_month.csv", "leaves_y_month.csv", "tree_y_month.json"):
            assert (copy / "discover" / name).read_bytes() == (out / "discover" / name).read_bytes()


class TestSimulate:
    def test_simulate(self, tmp_path, capsys):
        sim = {
            "replications": 4,
            "n_treated": 300,
            "max_depth": 2,
            "scenarios": {"Large, No": [0.3, 0.3, 0.7, 0.7]},
            "splits": [[0.25, 0.75]],
        }
        cfg = write_config(tmp_path / "c.yaml", out=str(tmp_path / "o"), simulation=sim)
        assert run("simulate", "--config", cfg) == 0
        frame = pd.read_csv(tmp_path / "o" / "power.csv")
        assert frame.loc[0, "split"] == "25/75" and frame.loc[0, "replications"] == 4
        assert json.loads((tmp_path / "o" / "power.json").read_text())["version"] == "power/v1"
        assert "25/75" in capsys.readouterr().out
