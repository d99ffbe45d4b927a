import warnings

import numpy as np
import pandas as pd
import pytest

from conftest import random_deltas
from rsmdid.cart import Node, RegressionTree, TreeParams
from rsmdid.discovery import (
    R2Bounds,
    SplitPlan,
    annotate_tree,
    availability_strata,
    confirm_from_deltas,
    confirm_subgroups,
    extract_groups,
    fit_cart,
    fit_cart_deltas,
    r2_bounds,
    r2_from_deltas,
    set_features,
    split_design,
    split_rows,
    write_r2,
)
from rsmdid.errors import ConfigError, SplitError, UnknownCovariate
from rsmdid.inference import DeltaSets
from rsmdid.simulation import SimScenario, simulate_instance


def sim(tau=(0.0, 0.0, 1.0, 1.0), n=2000, seed=0, **kw):
    return simulate_instance(SimScenario(tau=tau, n_treated=n, **kw), seed)


class TestSplit:
    def test_fraction(self):
        disc, test = split_rows(100, SplitPlan(0.25, seed=3))
        assert len(disc) == 25 and len(test) == 75
        assert not set(disc) & set(test) and len(set(disc) | set(test)) == 100

    def test_determinism(self):
        a = SplitPlan(0.3, seed=11).assign(range(50))
        b = SplitPlan(0.3, seed=11).assign(range(50))
        c = SplitPlan(0.3, seed=12).assign(range(50))
        assert a == b and a != c

    def test_empty_side(self):
        with pytest.raises(SplitError):
            SplitPlan(0.01).assign(range(10))
        with pytest.raises(SplitError):
            SplitPlan(1.0)

    def test_design_integrity(self, null_design):
        disc, test = split_design(null_design, SplitPlan(0.25, seed=1))
        assert set(disc.set_ids).isdisjoint(test.set_ids)
        assert sorted(disc.set_ids + test.set_ids) == sorted(null_design.set_ids)
        units = {u for s in disc.sets for u in s.members}
        assert units.isdisjoint({u for s in test.sets for u in s.members})
        assert abs(len(disc) - 0.25 * len(null_design)) <= 1


class TestFeatures:
    def test_treated_covariates(self, null_panel, null_design):
        f = set_features(null_design, null_panel, ["sex", "age"])
        assert list(f.columns) == ["sex", "age"] and list(f.index) == null_design.set_ids
        assert f["age"].dtype == float

    def test_unknown(self, null_panel, null_design):
        with pytest.raises(UnknownCovariate):
            set_features(null_design, null_panel, ["height"])

    def test_no_covariates(self, null_panel, null_design):
        with pytest.raises(ConfigError):
            fit_cart(null_design, null_panel, "y", "month", [])

    def test_availability_strata(self):
        f = pd.DataFrame({"a": [1.0, np.nan, 3.0, np.nan], "b": ["x", "y", None, None]}, index=[10, 11, 12, 13])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            strata = availability_strata(f)
        assert strata["all"] == ([10], ["a", "b"])
        assert strata["without_a"] == ([11], ["b"])
        assert strata["without_b"] == ([12], ["a"])
        assert len(strata) == 3


class TestCart:
    def test_planted_x1(self):
        inst = sim(n=4000)
        tree = fit_cart_deltas(inst.deltas, inst.features, TreeParams(min_leaf=20))
        assert tree.root.feature == "x1"

    def test_design_level(self, null_panel, null_design):
        tree = fit_cart(null_design, null_panel, "y", "month", ["age", "sex"], TreeParams(min_leaf=20))
        usable = [s for s in null_design.sets if s.exposure_time >= 2]
        assert sum(n.n for n in tree.leaves()) == len(usable)


def stub_tree(shape):
    """Tree with fixed structure: 'root', 'stump', or 'unbalanced' (three leaves)."""
    counter = iter(range(10))

    def leaf():
        return Node(next(counter), 0, 1, 0.0, 0.0)

    root = Node(next(counter), 0, 3, 0.0, 1.0)
    if shape != "root":
        root.feature, root.threshold = "x1", 0.5
        root.left = leaf()
        if shape == "unbalanced":
            right = Node(next(counter), 1, 2, 0.0, 1.0, "x2", 0.5)
            right.left, right.right = leaf(), leaf()
            root.right = right
        else:
            root.right = leaf()
    return RegressionTree(root, ["x1", "x2"], TreeParams(), {})


class TestExtractGroups:
    @pytest.mark.parametrize("shape,leaves,rows", [("root", 1, 1), ("stump", 2, 3), ("unbalanced", 3, 5)])
    def test_row_counts(self, shape, leaves, rows):
        sub = extract_groups(stub_tree(shape))
        assert sub.cmat.G == leaves and sub.cmat.K == rows

    def test_unbalanced_rows(self):
        sub = extract_groups(stub_tree("unbalanced"))
        assert sub.cmat.c.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [0, 1, 1]]
        assert sub.cmat.labels == ("x1 <= 0.5", "x1 > 0.5 & x2 <= 0.5", "x1 > 0.5 & x2 > 0.5", "all", "x1 > 0.5")

    def test_groups_on_new_rows(self):
        sub = extract_groups(stub_tree("unbalanced"))
        f = pd.DataFrame({"x1": [0, 1, 1], "x2": [1, 0, 1]}, index=[7, 8, 9])
        assert sub.groups(f) == {7: 0, 8: 1, 9: 2}


class TestConfirm:
    def test_planted_leaf_flagged(self):
        inst = sim(tau=(0.0, 0.0, 1.0, 1.0), n=2000, seed=4)
        disc, test = split_rows(len(inst.deltas), SplitPlan(0.25, seed=1))
        tree = fit_cart_deltas(inst.deltas.take(disc), inst.features.iloc[disc], TreeParams())
        sub = extract_groups(tree)
        labels = sub.labels_for(inst.features.iloc[test])
        res = confirm_from_deltas(inst.deltas.take(test), labels, sub.cmat, n_draws=100_000)
        assert res.global_reject
        assert any(lb.startswith("x1") for lb in res.rejected_labels)
        leaves = res.extras["leaves"]
        assert len(leaves) == sub.cmat.G
        for lf in leaves:
            assert lf.rejected == (not np.isnan(lf.ci[0]))
        annotate_tree(sub, res)
        assert all("gamma_star" in n.extra for n in tree.leaves())

    def test_empty_leaf_dropped(self, rng):
        ds = random_deltas(rng, 90, shift=0.2)
        sub = extract_groups(stub_tree("unbalanced"))
        labels = np.repeat([0, 2], 45)
        with pytest.warns(RuntimeWarning, match="dropping 1"):
            res = confirm_from_deltas(ds, labels, sub.cmat, n_draws=100_000)
        assert res.cmat.G == 2
        assert res.group_ids == (0, 2)
        assert [c.label for c in res.per_comparison] == [
            "x1 <= 0.5",
            "x1 > 0.5 & x2 > 0.5",
            "all",
            "x1 > 0.5",
        ]

    def test_design_level(self, null_panel, null_design):
        disc, test = split_design(null_design, SplitPlan(0.5, seed=0))
        tree = fit_cart(disc, null_panel, "y", "month", ["age"], TreeParams(min_leaf=10))
        sub = extract_groups(tree)
        groups = sub.groups(set_features(test, null_panel, ["age"]))
        res = confirm_subgroups(test, null_panel, "y", "month", groups, sub.cmat, n_draws=100_000)
        assert isinstance(res.global_reject, bool)

    def test_unlabelled_sets(self, null_panel, null_design):
        sub = extract_groups(stub_tree("root"))
        with pytest.raises(ConfigError):
            confirm_subgroups(null_design, null_panel, "y", "month", {}, sub.cmat)


class TestR2:
    def test_validation(self):
        with pytest.raises(ValueError):
            R2Bounds(0.6, 0.5, 10)

    def test_no_systematic_variation(self):
        inst = sim(tau=(0.5, 0.5, 0.5, 0.5), n=3000, seed=1)
        b = r2_from_deltas(inst.deltas, inst.features)
        assert b.lower < 0.01
        assert 0 <= b.lower <= b.upper <= 1

    def test_oracle(self, rng):
        n = 3000
        x = rng.integers(0, 2, n)
        effect = x + rng.normal(0, 0.5, n)
        deltas = 0.01 * rng.standard_normal((n, 4))
        deltas[:, 0] += effect
        ds = DeltaSets(np.arange(n), deltas, np.full(n, 4))
        feats = pd.DataFrame({"x1": x})
        oracle = np.corrcoef(effect, x)[0, 1] ** 2
        b = r2_from_deltas(ds, feats)
        assert b.lower == pytest.approx(oracle, abs=0.01)
        assert b.upper >= b.lower

    def test_property_sweep(self, rng):
        for i in range(1000):
            n = int(rng.integers(10, 60))
            sizes = rng.integers(2, 5, n)
            deltas = np.full((n, 4), np.nan)
            for r, m in enumerate(sizes):
                deltas[r, :m] = rng.normal(0, rng.uniform(0.1, 2), m)
            x = rng.integers(0, 2, n)
            deltas[:, 0] += rng.uniform(0, 2) * x
            feats = pd.DataFrame({"x1": x, "x2": rng.normal(size=n), "c": rng.choice(list("ab"), n)})
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                b = r2_from_deltas(DeltaSets(np.arange(n), deltas, sizes), feats)
            assert 0 <= b.lower <= b.upper <= 1

    def test_singular_uses_ridge(self, rng):
        inst = sim(n=200, seed=2)
        feats = inst.features.assign(copy=inst.features["x1"])
        assert r2_from_deltas(inst.deltas, feats).ridge

    def test_too_few_sets(self, rng):
        with pytest.raises(ConfigError):
            r2_from_deltas(random_deltas(rng, 3), pd.DataFrame({"a": [0, 1, 2], "b": [1.0, 2.0, 0.5]}))

    def test_export(self, tmp_path, null_panel, null_design):
        b = r2_bounds(null_design, null_panel, "y", "month", ["age", "sex"])
        write_r2([("y", "month", b)], tmp_path / "r2.csv")
        frame = pd.read_csv(tmp_path / "r2.csv")
        assert list(frame.columns) == ["outcome", "horizon", "lower", "upper"]
        assert 0 <= frame.loc[0, "lower"] <= frame.loc[0, "upper"] <= 1
