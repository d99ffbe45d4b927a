import json

import numpy as np
import pandas as pd
import pytest

from rsmdid.cart import TreeParams, fit_tree
from rsmdid.errors import ConfigError


@pytest.fixture
def planted(rng):
    X = pd.DataFrame({"x1": rng.integers(0, 2, 200), "x2": rng.integers(0, 2, 200), "x3": rng.normal(size=200)})
    return X, X["x1"].to_numpy(dtype=float)


class TestFit:
    def test_planted_split(self, planted):
        X, y = planted
        tree = fit_tree(X, y, TreeParams(min_leaf=5))
        assert tree.root.feature == "x1" and tree.root.threshold == 0.5
        assert len(tree.leaves()) == 2
        assert sorted(n.mean for n in tree.leaves()) == pytest.approx([0.0, 1.0])

    def test_constant_response(self, planted):
        X, _ = planted
        tree = fit_tree(X, np.full(len(X), 3.0))
        assert tree.root.is_leaf and tree.depth == 0

    def test_no_columns(self):
        with pytest.raises(ConfigError):
            fit_tree(pd.DataFrame(index=range(5)), np.zeros(5))

    def test_duplicated_data_same_tree(self, planted, rng):
        X, _ = planted
        y = X["x1"] + 0.5 * X["x2"] + rng.normal(0, 0.3, len(X))
        a = fit_tree(X, y, TreeParams(min_leaf=10))
        b = fit_tree(pd.concat([X, X], ignore_index=True), np.concatenate([y, y]), TreeParams(min_leaf=20))
        assert [(n.feature, n.threshold) for n in a.internal()] == [(n.feature, n.threshold) for n in b.internal()]

    def test_tie_goes_to_lowest_name(self, rng):
        x = rng.integers(0, 2, 100)
        X = pd.DataFrame({"b": x, "a": x})
        tree = fit_tree(X, x.astype(float), TreeParams(min_leaf=5))
        assert tree.root.feature == "a"

    def test_min_leaf_and_depth(self, rng):
        X = pd.DataFrame({"x": rng.normal(size=500), "z": rng.normal(size=500)})
        y = np.sin(3 * X["x"]) + X["z"] ** 2 + rng.normal(0, 0.1, 500)
        tree = fit_tree(X, y, TreeParams(min_leaf=30, max_depth=3, cp=0.0))
        assert all(leaf.n >= 30 for leaf in tree.leaves())
        assert tree.depth <= 3

    def test_conservation(self, rng):
        X = pd.DataFrame({"x": rng.normal(size=300), "c": rng.choice(list("abcd"), 300)})
        y = X["x"] + (X["c"] == "b") + rng.normal(size=300)
        tree = fit_tree(X, y, TreeParams(min_leaf=10, cp=0.0))
        leaves = tree.leaves()
        assert sum(n.n * n.mean for n in leaves) / sum(n.n for n in leaves) == pytest.approx(np.mean(y))
        assert sum(n.n for n in leaves) == len(y)

    def test_pruning_coarsens(self, rng):
        X = pd.DataFrame({"x": rng.normal(size=400)})
        y = X["x"] + rng.normal(size=400)
        sizes = [len(fit_tree(X, y, TreeParams(min_leaf=10, cp=cp)).leaves()) for cp in (0.0, 2.0, 10.0, 50.0, 1000.0)]
        assert sizes == sorted(sizes, reverse=True)
        assert sizes[-1] == 1

    def test_penalty_scale(self):
        # the split gains n/4 = 10 and var(y) = 1/4, so it survives iff cp < n
        X = pd.DataFrame({"x": np.arange(40)})
        y = (np.arange(40) >= 20).astype(float)
        assert len(fit_tree(X, y, TreeParams(min_leaf=5, cp=39.0)).leaves()) == 2
        assert len(fit_tree(X, y, TreeParams(min_leaf=5, cp=41.0)).leaves()) == 1

    def test_categorical_subset(self, rng):
        X = pd.DataFrame({"c": rng.choice(list("abcde"), 400)})
        y = X["c"].isin(["b", "d"]).astype(float)
        tree = fit_tree(X, y, TreeParams(min_leaf=5))
        assert tree.root.levels in (frozenset({"b", "d"}), frozenset({"a", "c", "e"}))
        assert len(tree.leaves()) == 2

    def test_many_levels_use_ordering(self, rng):
        levels = [f"l{i:02d}" for i in range(15)]
        X = pd.DataFrame({"c": rng.choice(levels, 1500)})
        y = X["c"].map({lv: i % 2 for i, lv in enumerate(levels)}).astype(float)
        tree = fit_tree(X, y, TreeParams(min_leaf=5))
        assert sorted(n.mean for n in tree.leaves()) == pytest.approx([0.0, 1.0])


class TestApply:
    def test_predicates_partition(self, rng):
        X = pd.DataFrame({"x": rng.normal(size=300), "c": rng.choice(list("abc"), 300)})
        y = X["x"] * (X["c"] == "a") + rng.normal(0, 0.2, 300)
        tree = fit_tree(X, y, TreeParams(min_leaf=15, cp=0.0))
        leaf = tree.apply(X)
        assert set(leaf) == {n.id for n in tree.leaves()}
        for node in tree.leaves():
            assert (leaf == node.id).sum() == node.n
        assert np.allclose(tree.predict(X), [{n.id: n.mean for n in tree.leaves()}[i] for i in leaf])

    def test_unseen_level_goes_to_larger_child(self, rng):
        X = pd.DataFrame({"c": np.array(["a"] * 30 + ["b"] * 70)})
        tree = fit_tree(X, (X["c"] == "a").astype(float), TreeParams(min_leaf=5))
        big = max(tree.leaves(), key=lambda n: n.n)
        assert tree.apply(pd.DataFrame({"c": ["zzz"]}))[0] == big.id

    def test_missing_numeric(self, planted):
        X, y = planted
        tree = fit_tree(X, y, TreeParams(min_leaf=5))
        out = tree.apply(pd.DataFrame({"x1": [np.nan], "x2": [0], "x3": [0.0]}))
        assert out[0] in {n.id for n in tree.leaves()}


class TestExport:
    def test_json_and_text(self, tmp_path, planted):
        X, y = planted
        tree = fit_tree(X, y, TreeParams(min_leaf=5))
        tree.to_json(tmp_path / "t.json")
        data = json.loads((tmp_path / "t.json").read_text())
        assert data["version"] == "tree/v1"
        assert data["root"]["split"] == {"covariate": "x1", "threshold": 0.5}
        assert data["root"]["left"]["leaf"] is True
        text = tree.to_text().splitlines()
        assert text[0].startswith("root [n=200")
        assert text[1].strip().startswith("x1 <= 0.5") and text[1].endswith("*")

    def test_predicate(self, planted):
        X, y = planted
        tree = fit_tree(X, y, TreeParams(min_leaf=5))
        assert tree.predicate(tree.root) == "all"
        assert [tree.predicate(n) for n in tree.leaves()] == ["x1 <= 0.5", "x1 > 0.5"]
