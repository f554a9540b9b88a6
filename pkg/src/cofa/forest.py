"""CART classification trees with exact level-set splits, grown with
per-node dice-rolling feature selection, and seeded forests of them.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import _tree_kernel as K
from .datamodel import CATEGORICAL, NUMERIC, TARGET, Dataset

FORMAT = "cofa-forest/1"


@dataclass(frozen=True)
class ForestParams:
    """Growth settings. Stopping defaults follow rpart's documented ones."""

    n_trees: int = 100
    min_split: int = 20
    min_bucket: int = 7
    max_depth: int = 30
    complexity: float = 0.01
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_bucket < 1:
            raise ValueError("min_bucket must be >= 1")
        if self.complexity < 0:
            raise ValueError("complexity must be >= 0")
        if self.max_depth < 0 or self.min_split < 1:
            raise ValueError("max_depth must be >= 0 and min_split >= 1")


@dataclass(frozen=True)
class SplitRule:
    feature: str
    kind: str  # "numeric-threshold" or "level-set"
    threshold: float | None = None
    left_levels: frozenset | None = None


@dataclass(frozen=True)
class TreeNode:
    id: int
    split: SplitRule | None
    children: tuple | None
    leaf_prediction: float
    n_node: int
    levels_present: frozenset


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout shared by all trees of a forest."""

    names: tuple
    is_cat: np.ndarray
    levels: tuple  # per feature: tuple of level names, or None
    target: int  # index of the cluster target, -1 if absent

    @classmethod
    def from_dataset(cls, d: Dataset) -> "FeatureLayout":
        cols = [c for c in d.schema if c.role in ("predictor", TARGET)]
        names = tuple(c.name for c in cols)
        is_cat = np.array([c.kind == CATEGORICAL for c in cols], dtype=np.bool_)
        levels = tuple(d.levels[c.name] if c.kind == CATEGORICAL else None for c in cols)
        target = names.index(d.target_name) if d.target_name in names else -1
        return cls(names, is_cat, levels, target)

    def ranks(self, X: np.ndarray):
        """Dense value ranks of the numeric columns (for the counting scan)."""
        n, p = X.shape
        ranks = np.zeros((n, p), dtype=np.int64)
        n_unique = np.zeros(p, dtype=np.int64)
        uniqs = []
        for j in range(p):
            if self.is_cat[j]:
                uniqs.append(np.zeros(0))
                continue
            u, inv = np.unique(X[:, j], return_inverse=True)
            ranks[:, j] = inv.ravel()
            n_unique[j] = len(u)
            uniqs.append(u)
        uniq = np.zeros((p, max(1, int(n_unique.max(initial=0)))))
        for j, u in enumerate(uniqs):
            uniq[j, : len(u)] = u
        return ranks, n_unique, uniq

    @property
    def n_levels(self) -> np.ndarray:
        return np.array([len(lv) if lv is not None else 0 for lv in self.levels], dtype=np.int64)

    def matrix(self, d: Dataset) -> np.ndarray:
        """Feature matrix for ``d`` with categorical codes mapped onto this
        layout's dictionaries; unseen levels become -1."""
        X = np.empty((d.n_rows, len(self.names)), dtype=np.float64)
        for j, name in enumerate(self.names):
            if name not in d.data:
                raise ValueError(f"schema mismatch: column {name!r} missing")
            kind = d.column_schema(name).kind
            if self.is_cat[j]:
                if kind != CATEGORICAL:
                    raise ValueError(f"schema mismatch: column {name!r} should be categorical")
                index = {lv: i for i, lv in enumerate(self.levels[j])}
                remap = np.array([index.get(lv, -1) for lv in d.levels[name]], dtype=np.float64)
                X[:, j] = remap[d[name]] if len(remap) else -1.0
            else:
                if kind != NUMERIC:
                    raise ValueError(f"schema mismatch: column {name!r} should be numeric")
                X[:, j] = d[name]
        return X


@dataclass(frozen=True, eq=False)
class Tree:
    """Node table of one fitted tree. Node 0 is the root."""

    layout: FeatureLayout
    kind: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_node: np.ndarray
    n_pos: np.ndarray
    depth: np.ndarray
    left_levels: np.ndarray
    present_levels: np.ndarray
    target_present: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.kind)

    @property
    def is_trivial(self) -> bool:
        return bool(self.kind[0] == K.LEAF)

    @property
    def leaf_prediction(self) -> np.ndarray:
        return self.n_pos / np.maximum(self.n_node, 1)

    def node(self, i: int) -> TreeNode:
        split = None
        children = None
        if self.kind[i] != K.LEAF:
            j = int(self.feature[i])
            name = self.layout.names[j]
            if self.kind[i] == K.LEVEL_SPLIT:
                split = SplitRule(name, "level-set",
                                  left_levels=frozenset(np.flatnonzero(self.left_levels[i]).tolist()))
            else:
                split = SplitRule(name, "numeric-threshold", threshold=float(self.threshold[i]))
            children = (int(self.left[i]), int(self.right[i]))
        return TreeNode(i, split, children, float(self.leaf_prediction[i]), int(self.n_node[i]),
                        frozenset(np.flatnonzero(self.target_present[i]).tolist()))

    def nodes(self):
        return [self.node(i) for i in range(self.n_nodes)]

    def apply(self, X: np.ndarray) -> np.ndarray:
        return K.route(X, self.layout.is_cat, self.kind, self.feature, self.threshold,
                       self.left, self.right, self.left_levels)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_prediction[self.apply(X)]

    def to_dict(self) -> dict:
        out = []
        for i in range(self.n_nodes):
            rec = {"id": i, "n": int(self.n_node[i]), "pos": int(self.n_pos[i]),
                   "prediction": float(self.leaf_prediction[i])}
            if self.kind[i] != K.LEAF:
                j = int(self.feature[i])
                name = self.layout.names[j]
                if self.kind[i] == K.LEVEL_SPLIT:
                    lv = self.layout.levels[j]
                    rec["split"] = {
                        "feature": name, "kind": "level-set",
                        "left_levels": [lv[c] for c in np.flatnonzero(self.left_levels[i])],
                        "present_levels": [lv[c] for c in np.flatnonzero(self.present_levels[i])],
                    }
                else:
                    rec["split"] = {"feature": name, "kind": "numeric-threshold",
                                    "threshold": float(self.threshold[i])}
                rec["children"] = [int(self.left[i]), int(self.right[i])]
            out.append(rec)
        return {"nodes": out}


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple
    params: ForestParams
    layout: FeatureLayout

    @property
    def trivial_root_count(self) -> int:
        return int(sum(bool(t.is_trivial) for t in self.trees))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "params": asdict(self.params),
            "features": [
                {"name": n, "kind": CATEGORICAL if c else NUMERIC,
                 **({"levels": list(lv)} if lv is not None else {})}
                for n, c, lv in zip(self.layout.names, self.layout.is_cat, self.layout.levels)
            ],
            "target": self.layout.names[self.layout.target] if self.layout.target >= 0 else None,
            "trivial_root_count": self.trivial_root_count,
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


# ---------------------------------------------------------------------------
# split search (single-node entry points)


def dice_roll_features(available: Sequence, rng) -> list:
    """Keep each feature iff a uniform draw on 1..k is <= sqrt(k).

    The inclusion probability is floor(sqrt(k))/k and the result may be empty.
    """
    k = len(available)
    if k == 0:
        raise ValueError("no features available")
    rolls = np.random.default_rng(rng).integers(1, k + 1, size=k)
    limit = math.isqrt(k)
    return [f for f, r in zip(available, rolls) if r <= limit]


def _gini(pos: int, n: int) -> float:
    return 2.0 * pos * (n - pos) / (n * n) if n else 0.0


def best_categorical_split(codes, outcome, n_levels: int | None = None, min_bucket: int = 1,
                           feature: str = "x"):
    """Gini-optimal level bipartition for one node.

    Parameters
    ----------
    codes : int array
        Level codes of the rows at the node.
    outcome : 0/1 array
    n_levels : int, optional
        Dictionary size; defaults to ``max(codes) + 1``.

    Returns
    -------
    (SplitRule, improvement) or None when no bipartition leaves at least
    ``min_bucket`` rows on each side.
    """
    codes = np.asarray(codes, dtype=np.int64)
    y = np.asarray(outcome, dtype=np.int64)
    if n_levels is None:
        n_levels = int(codes.max()) + 1
    left = np.zeros(n_levels, dtype=np.bool_)
    present = np.zeros(n_levels, dtype=np.bool_)
    score, ok = K.level_split(codes, y, n_levels, min_bucket, left, present)
    if not ok:
        return None
    n = len(y)
    improvement = _gini(int(y.sum()), n) - 2.0 * score / n
    rule = SplitRule(feature, "level-set", left_levels=frozenset(np.flatnonzero(left).tolist()))
    return rule, improvement


def best_numeric_split(values, outcome, min_bucket: int = 1, feature: str = "x"):
    """Gini-optimal midpoint threshold, or None for a constant column."""
    values = np.asarray(values, dtype=np.float64)
    y = np.asarray(outcome, dtype=np.int64)
    score, thr, ok = K.numeric_split(values, y, min_bucket)
    if not ok:
        return None
    n = len(y)
    improvement = _gini(int(y.sum()), n) - 2.0 * score / n
    return SplitRule(feature, "numeric-threshold", threshold=float(thr)), improvement


# ---------------------------------------------------------------------------
# fitting


class _Prepared:
    """Arrays shared read-only by every tree grown on one dataset."""

    def __init__(self, layout: FeatureLayout, X: np.ndarray, y: np.ndarray):
        self.layout = layout
        self.X = X
        self.y = y
        self.ranks, self.n_unique, self.uniq = layout.ranks(X)
        self.n_levels = layout.n_levels

    @classmethod
    def from_dataset(cls, d: Dataset) -> "_Prepared":
        layout = FeatureLayout.from_dataset(d)
        return cls(layout, layout.matrix(d), d.outcome.astype(np.int64))

    def with_target(self, codes: np.ndarray) -> "_Prepared":
        """Copy with the cluster-target column replaced (used by null replicates)."""
        X = self.X.copy()
        X[:, self.layout.target] = codes
        out = object.__new__(_Prepared)
        out.__dict__.update(self.__dict__)
        out.X = X
        return out


def _grow(prep: _Prepared, rows: np.ndarray, params: ForestParams, dice_seed: int) -> Tree:
    layout = prep.layout
    n_target = len(layout.levels[layout.target]) if layout.target >= 0 else 0
    arrays = K.grow_tree(prep.X, layout.is_cat, prep.n_levels, prep.ranks, prep.n_unique, prep.uniq,
                         prep.y, rows, layout.target, n_target,
                         params.min_split, params.min_bucket, params.max_depth,
                         float(params.complexity), dice_seed)
    return Tree(layout, *arrays)


def _tree_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def fit_tree(d: Dataset, params: ForestParams, rng) -> Tree:
    """Grow a single tree on all rows of ``d`` (no resampling)."""
    rng = np.random.default_rng(rng)
    prep = _Prepared.from_dataset(d)
    rows = np.arange(d.n_rows, dtype=np.int64)
    return _grow(prep, rows, params, int(rng.integers(2**32)))


def _forest_job(prep: _Prepared, params: ForestParams, t: int) -> Tree:
    rng = _tree_stream(params.seed, t)
    n = len(prep.y)
    if params.bootstrap:
        rows = rng.integers(0, n, size=n).astype(np.int64)
    else:
        rows = np.arange(n, dtype=np.int64)
    return _grow(prep, rows, params, int(rng.integers(2**32)))


def fit_forest(d: Dataset, params: ForestParams, n_jobs: int = 1) -> Forest:
    """Fit ``params.n_trees`` trees.

    Tree ``t`` draws its bootstrap sample and dice rolls from a substream
    keyed by ``(params.seed, t)``, so the forest does not depend on
    ``n_jobs`` or on scheduling.
    """
    return _fit_prepared(_Prepared.from_dataset(d), params, n_jobs)


def _fit_prepared(prep: _Prepared, params: ForestParams, n_jobs: int = 1) -> Forest:
    if n_jobs == 1:
        trees = [_forest_job(prep, params, t) for t in range(params.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            trees = list(ex.map(lambda t: _forest_job(prep, params, t), range(params.n_trees)))
    return Forest(tuple(trees), params, prep.layout)


def predict_forest(f: Forest, d: Dataset) -> np.ndarray:
    """Mean leaf positive fraction across trees. Levels unseen in training
    follow the right (complement) branch of level-set splits."""
    X = f.layout.matrix(d)
    out = np.zeros(d.n_rows)
    for t in f.trees:
        out += t.predict(X)
    return out / len(f.trees)
