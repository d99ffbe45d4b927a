"""Regression trees grown by greedy squared-error reduction with cost-complexity pruning.

Numeric features split at midpoints between sorted unique values, sending
``x <= threshold`` left. Categorical features split on a level subset: all
subsets when there are at most ``MAX_SUBSET_LEVELS`` levels, otherwise
cuts along levels ordered by mean response. Ties between equally good
splits go to the lowest feature name, then the lowest threshold.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import ConfigError

MAX_SUBSET_LEVELS = 10
TREE_VERSION = "tree/v1"


@dataclass(frozen=True)
class TreeParams:
    min_leaf: int = 20
    max_depth: int = 4
    cp: float = 0.01  # penalty per leaf, as a multiple of the response variance

    def __post_init__(self):
        if self.min_leaf < 1 or self.max_depth < 0 or self.cp < 0:
            raise ConfigError(f"invalid tree parameters {self}")


@dataclass
class Node:
    id: int
    depth: int
    n: int
    mean: float
    sse: float
    feature: Optional[str] = None
    threshold: Optional[float] = None
    levels: Optional[frozenset] = None  # categorical split: levels sent left
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    extra: dict = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def goes_left(self, values: pd.Series) -> np.ndarray:
        if self.levels is not None:
            return values.isin(self.levels).to_numpy()
        return (values.to_numpy(dtype=float) <= self.threshold)

    def condition(self, left: bool = True) -> str:
        if self.levels is not None:
            levels = ", ".join(str(v) for v in sorted(self.levels, key=str))
            return f"{self.feature} {'in' if left else 'not in'} {{{levels}}}"
        return f"{self.feature} {'<=' if left else '>'} {self.threshold:g}"


def _is_categorical(col: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(col) or pd.api.types.is_bool_dtype(col)


def _sse(s, s2, n):
    return s2 - s * s / n


def _numeric_split(x, y, min_leaf):
    """Best (gain, threshold) for one numeric column; gain None if no admissible cut."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(ys)
    cs, cs2 = np.cumsum(ys), np.cumsum(ys * ys)
    i = np.arange(min_leaf, n - min_leaf + 1)  # left size
    if len(i) == 0:
        return None, None
    i = i[xs[i - 1] < xs[np.minimum(i, n - 1)]]
    if len(i) == 0:
        return None, None
    left = _sse(cs[i - 1], cs2[i - 1], i)
    right = _sse(cs[-1] - cs[i - 1], cs2[-1] - cs2[i - 1], n - i)
    total = _sse(cs[-1], cs2[-1], n)
    gain = total - left - right
    best = np.flatnonzero(gain >= gain.max() - 1e-12 * max(1.0, abs(total)))[0]
    k = i[best]
    return float(gain[best]), float(0.5 * (xs[k - 1] + xs[k]))


def _categorical_split(x, y, min_leaf):
    """Best (gain, left-level set) for one categorical column."""
    levels = sorted(pd.unique(x), key=str)
    if len(levels) < 2:
        return None, None
    codes = pd.Categorical(x, categories=levels).codes
    cnt = np.bincount(codes, minlength=len(levels)).astype(float)
    s = np.bincount(codes, y, minlength=len(levels))
    s2 = np.bincount(codes, y * y, minlength=len(levels))
    total = _sse(s.sum(), s2.sum(), cnt.sum())
    if len(levels) <= MAX_SUBSET_LEVELS:
        # subsets holding the first level enumerate every two-way partition once
        candidates = [
            (0,) + rest
            for r in range(0, len(levels) - 1)
            for rest in itertools.combinations(range(1, len(levels)), r)
        ]
    else:
        order = np.argsort(s / np.maximum(cnt, 1), kind="stable")
        candidates = [tuple(sorted(order[:k])) for k in range(1, len(levels))]
    best_gain, best_set = None, None
    for subset in candidates:
        m = np.zeros(len(levels), dtype=bool)
        m[list(subset)] = True
        nl, nr = cnt[m].sum(), cnt[~m].sum()
        if nl < min_leaf or nr < min_leaf:
            continue
        gain = total - _sse(s[m].sum(), s2[m].sum(), nl) - _sse(s[~m].sum(), s2[~m].sum(), nr)
        if best_gain is None or gain > best_gain + 1e-12 * max(1.0, abs(total)):
            best_gain, best_set = gain, frozenset(levels[j] for j in subset)
    return best_gain, best_set


class RegressionTree:
    def __init__(self, root: Node, features: list, params: TreeParams, categorical: dict):
        self.root = root
        self.features = features
        self.params = params
        self.categorical = categorical

    # -- traversal ----------------------------------------------------------

    def nodes(self) -> list:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.extend([node.right, node.left])
        return out

    def leaves(self) -> list:
        return [n for n in self.nodes() if n.is_leaf]

    def internal(self) -> list:
        return [n for n in self.nodes() if not n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def path(self, target: Node) -> list:
        """Conditions from the root down to ``target``."""

        def walk(node, acc):
            if node is target:
                return acc
            if node.is_leaf:
                return None
            return walk(node.left, acc + [node.condition(True)]) or walk(node.right, acc + [node.condition(False)])

        return walk(self.root, [])

    def predicate(self, node: Node) -> str:
        conds = self.path(node)
        return " & ".join(conds) if conds else "all"

    def apply(self, X: pd.DataFrame) -> np.ndarray:
        """Leaf node id reached by every row of ``X``.

        Unseen categorical levels and missing values follow the larger child.
        """
        out = np.empty(len(X), dtype=int)
        rows = np.arange(len(X))

        def route(node, idx):
            if len(idx) == 0:
                return
            if node.is_leaf:
                out[idx] = node.id
                return
            col = X[node.feature].iloc[idx]
            left = node.goes_left(col)
            if node.levels is not None:
                known = col.isin(self.categorical.get(node.feature, ())).to_numpy()
            else:
                known = col.notna().to_numpy()
            default_left = node.left.n >= node.right.n
            left = np.where(known, left, default_left)
            route(node.left, idx[left])
            route(node.right, idx[~left])

        route(self.root, rows)
        return out

    def predict(self, X: pd.DataFrame) -> np.ndarray:
        means = {n.id: n.mean for n in self.leaves()}
        return np.array([means[i] for i in self.apply(X)])

    # -- export -------------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(node):
            out = {"id": node.id, "depth": node.depth, "n": node.n, "mean": node.mean}
            if node.is_leaf:
                out["leaf"] = True
                out.update(node.extra)
                return out
            split = {"covariate": node.feature}
            if node.levels is not None:
                split["levels"] = sorted((str(v) for v in node.levels))
            else:
                split["threshold"] = node.threshold
            out.update(split=split, left=enc(node.left), right=enc(node.right))
            return out

        return {
            "version": TREE_VERSION,
            "params": {"min_leaf": self.params.min_leaf, "max_depth": self.params.max_depth, "cp": self.params.cp},
            "features": self.features,
            "root": enc(self.root),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_text(self) -> str:
        lines = []

        def show(node, indent, label):
            pad = "  " * indent
            info = f"n={node.n} mean={node.mean:.4g}"
            for key, val in node.extra.items():
                info += f" {key}={val}"
            lines.append(f"{pad}{label} [{info}]" + ("" if not node.is_leaf else " *"))
            if not node.is_leaf:
                show(node.left, indent + 1, node.condition(True))
                show(node.right, indent + 1, node.condition(False))

        show(self.root, 0, "root")
        return "\n".join(lines)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float):
        return v
    return str(v)


def fit_tree(X: pd.DataFrame, y, params: TreeParams = TreeParams()) -> RegressionTree:
    """Grow by greedy squared-error reduction, then prune bottom-up at ``cp * var(y)`` per leaf."""
    if X.shape[1] == 0:
        raise ConfigError("no covariates to split on")
    y = np.asarray(y, dtype=float)
    if len(y) != len(X):
        raise ConfigError("feature and response lengths differ")
    features = sorted(X.columns, key=str)
    cats = {f: _is_categorical(X[f]) for f in features}
    cols = {f: (X[f].to_numpy() if cats[f] else X[f].to_numpy(dtype=float)) for f in features}
    counter = itertools.count()

    def grow(idx, depth):
        yy = y[idx]
        node = Node(next(counter), depth, len(idx), float(yy.mean()), float(((yy - yy.mean()) ** 2).sum()))
        if depth >= params.max_depth or len(idx) < 2 * params.min_leaf or node.sse <= 1e-12 * max(1.0, len(idx)):
            return node
        best = None
        for f in features:
            x = cols[f][idx]
            if cats[f]:
                gain, where = _categorical_split(x, yy, params.min_leaf)
            else:
                gain, where = _numeric_split(x, yy, params.min_leaf)
            if gain is None:
                continue
            # features are visited in name order, so only a strictly larger gain wins
            if best is None or gain > best[0] + 1e-12 * max(1.0, node.sse):
                best = (gain, f, where)
        if best is None or best[0] <= 1e-12 * max(1.0, node.sse):
            return node
        _, f, where = best
        node.feature = f
        if cats[f]:
            node.levels = where
            go = np.isin(cols[f][idx], list(where))
        else:
            node.threshold = where
            go = cols[f][idx] <= where
        node.left = grow(idx[go], depth + 1)
        node.right = grow(idx[~go], depth + 1)
        return node

    root = grow(np.arange(len(y)), 0)
    penalty = params.cp * root.sse / root.n

    def prune(node):
        """Return (leaf SSE, leaf count) of the kept subtree."""
        if node.is_leaf:
            return node.sse, 1
        sl, ll = prune(node.left)
        sr, lr = prune(node.right)
        if sl + sr + penalty * (ll + lr) < node.sse + penalty:
            return sl + sr, ll + lr
        node.feature = node.threshold = node.levels = node.left = node.right = None
        return node.sse, 1

    prune(root)
    categorical = {f: set(pd.unique(X[f])) for f in features if cats[f]}
    return RegressionTree(root, features, params, categorical)
