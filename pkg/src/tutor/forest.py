"""Decision trees and random forests written from scratch.

The validation-selected forest is the knowledge base that labels synthetic
rows; one forest per categorical feature serves as its semantic integrity
classifier. Trees are stored as flat node arrays so prediction is a
vectorised walk, and can be exported as nested JSON or as plain-text rules.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch
from .tabular import CATEGORICAL, Dataset, FeatureSchema

CRITERIA = ("gini", "entropy")
DEFAULT_GRID = {"criterion": ("gini", "entropy"), "max_depth": (4, 8, 16, None), "n_trees": (25, 100)}
_EPS = 1e-12


def impurity(counts, criterion="gini"):
    """Gini or entropy (nats) of class-count vectors along the last axis."""
    counts = np.asarray(counts, dtype=float)
    tot = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    if criterion == "gini":
        return 1.0 - np.sum(p * p, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return -np.sum(p * logs, axis=-1)


def best_split_for_feature(x, Y, criterion, categorical):
    """Best (gain, threshold) for one column; Y is the one-hot label matrix.

    Continuous thresholds are midpoints between consecutive distinct values
    (left: x <= t); categorical splits send one level left.
    """
    n = x.shape[0]
    parent = impurity(Y.sum(0), criterion)
    if categorical:
        levels = np.unique(x)
        if levels.size < 2:
            return -np.inf, None
        left = np.stack([Y[x == lv].sum(0) for lv in levels])
        right = Y.sum(0)[None, :] - left
    else:
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cum = np.cumsum(Y[order], axis=0)
        cut = np.flatnonzero(xs[1:] > xs[:-1])  # split after position `cut`
        if cut.size == 0:
            return -np.inf, None
        left = cum[cut]
        right = cum[-1][None, :] - left
    nl = left.sum(1)
    nr = right.sum(1)
    child = (nl * impurity(left, criterion) + nr * impurity(right, criterion)) / n
    gains = parent - child
    i = int(np.argmax(gains))
    if categorical:
        return float(gains[i]), float(levels[i])
    return float(gains[i]), float(0.5 * (xs[cut[i]] + xs[cut[i] + 1]))


@dataclass
class Tree:
    """Flat binary tree. feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    categorical: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes) training histogram per node

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    @property
    def depth(self):
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def leaf_class(self):
        return np.argmax(self.counts, axis=1)

    def apply(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            v = X[r, self.feature[nd]]
            thr = self.threshold[nd]
            go_left = np.where(self.categorical[nd], v == thr, v <= thr)
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X):
        return self.leaf_class()[self.apply(np.asarray(X, dtype=float))]

    def to_nested(self, i=0):
        c = self.counts[i]
        if self.feature[i] < 0:
            return {"leaf": int(np.argmax(c)), "histogram": c.tolist()}
        node = {
            "feature": int(self.feature[i]),
            "left": self.to_nested(int(self.left[i])),
            "right": self.to_nested(int(self.right[i])),
            "histogram": c.tolist(),
        }
        if self.categorical[i]:
            node["levels"] = [self.threshold[i]]
        else:
            node["threshold"] = self.threshold[i]
        return node

    @classmethod
    def from_nested(cls, root):
        feats, thr, cat, lefts, rights, counts = [], [], [], [], [], []

        def rec(nd):
            i = len(feats)
            feats.append(-1)
            thr.append(0.0)
            cat.append(False)
            lefts.append(-1)
            rights.append(-1)
            counts.append(nd["histogram"])
            if "leaf" not in nd:
                feats[i] = nd["feature"]
                if "levels" in nd:
                    cat[i], thr[i] = True, float(nd["levels"][0])
                else:
                    thr[i] = float(nd["threshold"])
                lefts[i] = rec(nd["left"])
                rights[i] = rec(nd["right"])
            return i

        rec(root)
        return cls(
            np.array(feats, dtype=np.int64), np.array(thr, dtype=float), np.array(cat, dtype=bool),
            np.array(lefts, dtype=np.int64), np.array(rights, dtype=np.int64), np.array(counts, dtype=float),
        )

    def rules(self, feature_names, class_names, level_names=None):
        """One line per root-to-leaf path: 'a <= 1.5 AND b == x => class'."""
        out = []

        def rec(i, conds):
            if self.feature[i] < 0:
                out.append(" AND ".join(conds or ["TRUE"]) + f" => {class_names[int(np.argmax(self.counts[i]))]}")
                return
            f = int(self.feature[i])
            name = feature_names[f]
            if self.categorical[i]:
                lv = int(self.threshold[i])
                lvname = level_names[f][lv] if level_names and level_names[f] else str(lv)
                rec(int(self.left[i]), conds + [f"{name} == {lvname}"])
                rec(int(self.right[i]), conds + [f"{name} != {lvname}"])
            else:
                t = repr(float(self.threshold[i]))
                rec(int(self.left[i]), conds + [f"{name} <= {t}"])
                rec(int(self.right[i]), conds + [f"{name} > {t}"])

        rec(0, [])
        return out


def train_tree(
    X,
    y,
    n_classes: int,
    categorical=None,
    criterion: str = "gini",
    max_depth: Optional[int] = None,
    feature_subsample: Optional[int] = None,
    seed: int = 0,
) -> Tree:
    """Greedy top-down induction.

    Each node scores a random subset of `feature_subsample` features; when none
    of them yields a positive gain the remaining features are tried before the
    node becomes a leaf.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if n < 1:
        raise ValueError("need at least one row")
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    cat = np.zeros(d, dtype=bool) if categorical is None else np.asarray(categorical, dtype=bool)
    k = d if feature_subsample is None else max(1, min(int(feature_subsample), d))
    rng = np.random.default_rng(seed)
    Y = np.eye(n_classes)[y]
    feats, thr, iscat, lefts, rights, counts = [], [], [], [], [], []

    def grow(idx, depth):
        i = len(feats)
        c = Y[idx].sum(0)
        feats.append(-1)
        thr.append(0.0)
        iscat.append(False)
        lefts.append(-1)
        rights.append(-1)
        counts.append(c)
        if idx.size < 2 or np.count_nonzero(c) <= 1 or (max_depth is not None and depth >= max_depth):
            return i
        perm = rng.permutation(d)
        best = (_EPS, None, None)
        for group in (perm[:k], perm[k:]):
            for f in np.sort(group):
                g, t = best_split_for_feature(X[idx, f], Y[idx], criterion, cat[f])
                if g > best[0]:
                    best = (g, f, t)
            if best[1] is not None:
                break
        if best[1] is None:
            return i
        _, f, t = best
        go_left = X[idx, f] == t if cat[f] else X[idx, f] <= t
        feats[i], thr[i], iscat[i] = int(f), t, bool(cat[f])
        lefts[i] = grow(idx[go_left], depth + 1)
        rights[i] = grow(idx[~go_left], depth + 1)
        return i

    grow(np.arange(n), 0)
    return Tree(
        np.array(feats, dtype=np.int64), np.array(thr, dtype=float), np.array(iscat, dtype=bool),
        np.array(lefts, dtype=np.int64), np.array(rights, dtype=np.int64), np.array(counts, dtype=float),
    )


@dataclass
class Forest:
    trees: list
    n_classes: int
    n_features: int
    criterion: str = "gini"
    max_depth: Optional[int] = None
    feature_subsample: int = 1
    seed: int = 0
    validation_accuracy: Optional[float] = None
    selection: tuple = field(default=(), repr=False)  # ((criterion, depth, n_trees, val acc), ...)

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def identity(self):
        depth = "inf" if self.max_depth is None else self.max_depth
        return f"forest[{self.criterion},depth={depth},trees={self.n_trees}]"

    def tree_predictions(self, X):
        X = _rows(X)
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"forest expects {self.n_features} features, got {X.shape[1]}")
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X):
        """Majority vote; ties go to the lowest class index."""
        preds = self.tree_predictions(X)
        votes = np.zeros((preds.shape[1], self.n_classes), dtype=np.int64)
        for p in preds:
            votes[np.arange(p.size), p] += 1
        return np.argmax(votes, axis=1)

    def accuracy(self, X, y):
        y = np.asarray(y)
        return float(np.mean(self.predict(X) == y)) if y.size else 0.0

    def to_dict(self):
        return {
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "criterion": self.criterion,
            "max_depth": self.max_depth,
            "feature_subsample": self.feature_subsample,
            "seed": self.seed,
            "validation_accuracy": self.validation_accuracy,
            "trees": [t.to_nested() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [Tree.from_nested(t) for t in d["trees"]], d["n_classes"], d["n_features"], d["criterion"],
            d["max_depth"], d["feature_subsample"], d["seed"], d.get("validation_accuracy"),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def dump_rules(self, schema: Optional[FeatureSchema] = None, feature_names=None, class_names=None):
        if schema is not None:
            feature_names = feature_names or schema.names
            class_names = class_names or list(schema.classes)
            levels = [list(f.levels) if f.kind == CATEGORICAL else None for f in schema.features]
        else:
            levels = None
        feature_names = feature_names or [f"x{i}" for i in range(self.n_features)]
        class_names = class_names or [str(c) for c in range(self.n_classes)]
        lines = []
        for ti, t in enumerate(self.trees):
            lines += [f"tree {ti}: {r}" for r in t.rules(feature_names, class_names, levels)]
        return "\n".join(lines) + "\n"


def _rows(X):
    if isinstance(X, Dataset):
        return X.X
    return np.atleast_2d(np.asarray(X, dtype=float))


def _tree_seed(seed, criterion, max_depth, tree_index):
    depth = -1 if max_depth is None else int(max_depth)
    return np.random.default_rng([int(seed), CRITERIA.index(criterion), depth + 1, int(tree_index)])


def _grow_trees(X, y, n_classes, categorical, criterion, max_depth, n_trees, feature_subsample, seed):
    trees = []
    n = X.shape[0]
    for ti in range(n_trees):
        rng = _tree_seed(seed, criterion, max_depth, ti)
        boot = rng.integers(n, size=n)
        trees.append(
            train_tree(X[boot], y[boot], n_classes, categorical, criterion, max_depth, feature_subsample,
                       int(rng.integers(2**31)))
        )
    return trees


def _depth_key(d):
    return math.inf if d is None else d


def train_forest(
    train: Dataset,
    validation: Optional[Dataset] = None,
    grid: Optional[dict] = None,
    seed: int = 0,
    feature_subsample: Optional[int] = None,
    X=None, y=None, n_classes=None, categorical=None, X_val=None, y_val=None,
) -> Forest:
    """Fit one forest per grid point on bootstrap resamples; best validation accuracy wins.

    Ties prefer fewer trees, then smaller depth. Forests sharing (criterion,
    depth) reuse the same tree sequence, so a 25-tree candidate is the prefix
    of the 100-tree one.
    """
    if train is not None:
        X, y, n_classes = train.X, train.y, train.schema.n_classes
        categorical = [f.kind == CATEGORICAL for f in train.schema.features]
    if validation is not None:
        X_val, y_val = validation.X, validation.y
    if X_val is None:
        X_val, y_val = X, y
    grid = {**DEFAULT_GRID, **(grid or {})}
    d = X.shape[1]
    fs = feature_subsample or int(math.ceil(math.sqrt(d)))
    results = []
    for criterion, depth in itertools.product(grid["criterion"], grid["max_depth"]):
        sizes = sorted(grid["n_trees"])
        trees = _grow_trees(X, y, n_classes, categorical, criterion, depth, sizes[-1], fs, seed)
        for size in sizes:
            f = Forest(trees[:size], n_classes, d, criterion, depth, fs, seed)
            acc = f.accuracy(X_val, y_val)
            f.validation_accuracy = acc
            results.append((acc, size, depth, criterion, f))
    best = max(results, key=lambda r: (r[0], -r[1], -_depth_key(r[2])))
    forest = best[4]
    forest.selection = tuple((r[3], r[2], r[1], r[0]) for r in results)
    return forest


def predict(forest: Forest, rows):
    return forest.predict(rows)


@dataclass
class IntegrityClassifier:
    """Predicts one categorical feature from the continuous features only."""

    target_feature: str
    target_index: int
    continuous_indices: list
    model: Forest

    def predict(self, d: Dataset):
        return self.model.predict(d.X[:, self.continuous_indices])

    def passes(self, d: Dataset):
        return self.predict(d) == d.X[:, self.target_index].astype(np.int64)

    def to_dict(self):
        return {
            "target_feature": self.target_feature,
            "target_index": self.target_index,
            "continuous_indices": list(self.continuous_indices),
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["target_feature"], d["target_index"], d["continuous_indices"], Forest.from_dict(d["model"]))


def train_integrity_classifiers(
    train: Dataset, validation: Optional[Dataset] = None, grid: Optional[dict] = None, seed: int = 0
) -> list:
    schema = train.schema
    cont = schema.continuous_indices
    cats = schema.categorical_indices
    if not cats or not cont:
        return []
    out = []
    for j in cats:
        f = schema.features[j]
        yv = validation.X[:, j].astype(np.int64) if validation is not None else None
        forest = train_forest(
            None, None, grid, seed + 7919 * (j + 1),
            X=train.X[:, cont], y=train.X[:, j].astype(np.int64), n_classes=f.cardinality,
            categorical=[False] * len(cont),
            X_val=None if validation is None else validation.X[:, cont], y_val=yv,
        )
        out.append(IntegrityClassifier(f.name, j, list(cont), forest))
    return out


def verify(classifiers: Sequence[IntegrityClassifier], d: Dataset):
    """Boolean mask of rows that every classifier agrees with, plus per-feature rejection counts."""
    keep = np.ones(len(d), dtype=bool)
    rejected = {}
    for clf in classifiers:
        ok = clf.passes(d)
        rejected[clf.target_feature] = int((~ok).sum())
        keep &= ok
    return keep, rejected
