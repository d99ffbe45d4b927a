import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from conftest import make_panel
from rsmdid.errors import BadExposure, ConfigError, DuplicateRow, MissingData
from rsmdid.panel_data import (
    HazardSpec,
    NoiseSpec,
    SynthConfig,
    hazard_logit,
    load_panel,
    load_panel_json,
    read_panel_dir,
    save_panel_json,
    synth_generate,
    synth_latent,
    validate_panel,
    write_panel,
)


def write_files(tmp_path, rows, exposures, covariates=None):
    pd.DataFrame(rows, columns=["unit_id", "time", "variable", "value"]).to_csv(tmp_path / "y.csv", index=False)
    pd.DataFrame(exposures, columns=["unit_id", "exposure_time"]).to_csv(tmp_path / "z.csv", index=False)
    cov = None
    if covariates is not None:
        cov = tmp_path / "x.csv"
        pd.DataFrame(covariates, columns=["unit_id", "time", "variable", "value"]).to_csv(cov, index=False)
    return tmp_path / "y.csv", cov, tmp_path / "z.csv"


def grid_rows(units, times, skip=()):
    return [(u, t, "y", float(i * 10 + t)) for i, u in enumerate(units) for t in times if (u, t) not in skip]


class TestLoadPanel:
    def test_three_by_four(self, tmp_path):
        files = write_files(tmp_path, grid_rows("ABC", range(1, 5)), [("A", ""), ("B", "3"), ("C", "")])
        d = load_panel(*files)
        assert d.T == 4
        assert d.unit_ids == ("A", "B", "C")
        assert math.isinf(d.exposure[0]) and d.exposure[1] == 3 and math.isinf(d.exposure[2])
        assert d.outcomes["y"][1, 2] == 13.0

    def test_missing_cell(self, tmp_path):
        files = write_files(tmp_path, grid_rows("ABC", range(1, 5), skip={("A", 2)}), [("A", ""), ("B", "3"), ("C", "")])
        with pytest.raises(MissingData) as err:
            load_panel(*files)
        assert (err.value.unit, err.value.time, err.value.name) == ("A", 2, "y")

    def test_exposure_zero(self, tmp_path):
        files = write_files(tmp_path, grid_rows("AB", range(1, 5)), [("A", "0"), ("B", "")])
        with pytest.raises(BadExposure):
            load_panel(*files)

    def test_duplicate_row(self, tmp_path):
        rows = grid_rows("AB", range(1, 4)) + [("A", 2, "y", 9.0)]
        files = write_files(tmp_path, rows, [("A", ""), ("B", "")])
        with pytest.raises(DuplicateRow):
            load_panel(*files)

    def test_times_shifted_to_one(self, tmp_path):
        files = write_files(tmp_path, grid_rows("AB", range(201, 204)), [("A", "202"), ("B", "")])
        d = load_panel(*files)
        assert list(d.times) == [1, 2, 3]
        assert d.exposure[0] == 2

    def test_static_and_timed_covariates(self, tmp_path):
        cov = [("A", "", "sex", "F"), ("B", "", "sex", "M")]
        cov += [(u, t, "age", str(30 + t)) for u in "AB" for t in (1, 2, 3)]
        files = write_files(tmp_path, grid_rows("AB", (1, 2, 3)), [("A", "2"), ("B", "")], cov)
        d = load_panel(*files, schema={"categorical": ["sex"]})
        assert list(d.categorical["sex"][0]) == ["F", "F", "F"]
        assert d.continuous["age"][1, 2] == 33.0

    def test_missing_pre_exposure_covariate(self, tmp_path):
        cov = [("A", 1, "age", "30"), ("B", 1, "age", "40"), ("B", 2, "age", "41")]
        files = write_files(tmp_path, grid_rows("AB", (1, 2)), [("A", ""), ("B", "")], cov)
        with pytest.raises(MissingData):
            load_panel(*files)

    def test_unknown_schema_key(self, tmp_path):
        files = write_files(tmp_path, grid_rows("AB", (1, 2)), [("A", ""), ("B", "")])
        with pytest.raises(ConfigError):
            load_panel(*files, schema={"colour": "red"})


class TestValidate:
    def test_valid(self):
        d = make_panel({"age": [1.0, 2.0]}, exposure=[2, None])
        assert len(validate_panel(d)) == 0

    def test_gap(self):
        d = replace(make_panel(exposure=[None, None]), times=np.array([1, 2, 4]))
        report = validate_panel(d)
        assert any("gap" in msg for msg in report)

    def test_duplicate_id(self):
        d = replace(make_panel(exposure=[None, None]), unit_ids=("a", "a"))
        assert any("duplicate unit id 'a'" in msg for msg in validate_panel(d))

    def test_exposure_out_of_range(self):
        d = make_panel(exposure=[7, None])
        assert any("exposure time" in msg for msg in validate_panel(d))


class TestSynth:
    def test_noiseless_constant_series(self):
        cfg = SynthConfig(
            n_units=50,
            t_max=6,
            time_shock_sd=0.0,
            cohort_shock_sd=0.0,
            noise=NoiseSpec(family="none"),
            check_variance=False,
        )
        y = synth_generate(cfg).outcomes["y"]
        assert np.all(y == y[:, :1])

    def test_zero_noise_rejected(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(n_units=5, noise=NoiseSpec(scale=0.0)))

    def test_deterministic(self):
        a = synth_generate(SynthConfig(n_units=200, t_max=8, seed=11))
        b = synth_generate(SynthConfig(n_units=200, t_max=8, seed=11))
        np.testing.assert_array_equal(a.outcomes["y"], b.outcomes["y"])
        np.testing.assert_array_equal(a.exposure, b.exposure)
        np.testing.assert_array_equal(a.continuous["risk_score"], b.continuous["risk_score"])

    def test_outcome_seed_keeps_design_inputs(self):
        base = SynthConfig(n_units=200, t_max=8, seed=11)
        a, b = synth_generate(base), synth_generate(replace(base, outcome_seed=5))
        np.testing.assert_array_equal(a.exposure, b.exposure)
        np.testing.assert_array_equal(a.continuous["age"], b.continuous["age"])
        assert not np.allclose(a.outcomes["y"], b.outcomes["y"])

    def test_override_keeps_pre_exposure_outcomes(self):
        cfg = SynthConfig(n_units=300, t_max=10, effect=2.0, seed=4)
        d = synth_generate(cfg)
        uid = d.unit_ids[int(np.flatnonzero(np.isinf(d.exposure))[0])]
        e = synth_generate(cfg, exposure_override={uid: 6})
        i = d.index[uid]
        np.testing.assert_array_equal(d.outcomes["y"][i, :5], e.outcomes["y"][i, :5])
        np.testing.assert_allclose(e.outcomes["y"][i, 5:] - d.outcomes["y"][i, 5:], 2.0)

    def test_validates(self):
        assert len(validate_panel(synth_generate(SynthConfig(n_units=300, t_max=12)))) == 0

    def test_hazard_matches_logistic(self):
        """Exposure rate among at-risk units at each t against the analytic hazard (gamma = 0)."""
        cfg = SynthConfig(n_units=10000, t_max=6, hazard=HazardSpec(intercept=-3.0, age=0.3, female=-0.5), seed=9)
        d = synth_generate(cfg)
        female = (d.categorical["sex"][:, 0] == "F").astype(float)
        for t in range(1, 7):
            at_risk = d.exposure >= t
            k = t - 1
            p = 1 / (1 + np.exp(-hazard_logit(cfg.hazard, d.continuous["age"][at_risk, k],
                                              d.continuous["risk_score"][at_risk, k], female[at_risk])))
            hits = (d.exposure[at_risk] == t).sum()
            se = math.sqrt((p * (1 - p)).sum())
            assert abs(hits - p.sum()) <= 3 * se

    def test_gamma_zero_independent_of_u(self):
        cfg = SynthConfig(n_units=10000, t_max=12, hazard=HazardSpec(intercept=-4.0), seed=2)
        d, u = synth_generate(cfg), synth_latent(cfg)
        exposed = np.isfinite(d.exposure)
        diff = u[exposed].mean() - u[~exposed].mean()
        se = math.sqrt(1 / exposed.sum() + 1 / (~exposed).sum())
        assert abs(diff) < 3 * se

    def test_gamma_positive_selects_on_u(self):
        cfg = SynthConfig(n_units=5000, t_max=12, hazard=HazardSpec(intercept=-4.0, gamma=1.0), seed=2)
        d, u = synth_generate(cfg), synth_latent(cfg)
        exposed = np.isfinite(d.exposure)
        assert u[exposed].mean() - u[~exposed].mean() > 0.3


class TestRoundTrip:
    def test_directory(self, tmp_path):
        d = synth_generate(SynthConfig(n_units=60, t_max=5, seed=1))
        write_panel(d, tmp_path / "p")
        e = read_panel_dir(tmp_path / "p")
        assert e.unit_ids == d.unit_ids
        np.testing.assert_array_equal(e.exposure, d.exposure)
        np.testing.assert_array_equal(e.outcomes["y"], d.outcomes["y"])
        np.testing.assert_array_equal(e.continuous["age"], d.continuous["age"])
        assert (e.categorical["plan"] == d.categorical["plan"]).all()

    def test_json(self, tmp_path):
        d = synth_generate(SynthConfig(n_units=30, t_max=4, seed=1))
        save_panel_json(d, tmp_path / "p.json")
        e = load_panel_json(tmp_path / "p.json")
        np.testing.assert_array_equal(e.outcomes["y"], d.outcomes["y"])
        np.testing.assert_array_equal(e.exposure, d.exposure)
