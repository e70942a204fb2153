"""Random forest of Gini-split decision trees (bootstrap + sqrt feature sampling).

Training rows are put into a canonical order before the bootstrap draw, so a
fitted forest does not depend on the order in which rows were supplied: tree
``k`` draws ``n`` row positions with ``default_rng([*seed, k]).integers(0, n, n)``
from the rows sorted lexicographically by (features, label).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..contour_io import TORI_LABELS


def label_order(labels: Sequence[str]) -> list[str]:
    """Tori labels in their fixed order, then any other labels sorted."""
    present = set(labels)
    known = [l for l in TORI_LABELS if l in present]
    return known + sorted(present - set(known))


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # [nodes, classes]; meaningful at leaves

    def leaf_of(self, x: np.ndarray) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        return np.array([int(np.argmax(self.counts[self.leaf_of(x)])) for x in X], dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class ForestModel:
    trees: list
    classes: list
    feature_subsample: int
    seed: tuple = field(default=(0,))

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        votes = np.zeros((len(X), len(self.classes)), dtype=np.int64)
        for tree in self.trees:
            pred = tree.predict_index(X)
            votes[np.arange(len(X)), pred] += 1
        # argmax takes the first maximum, i.e. the earliest label in label order
        return np.argmax(votes, axis=1)

    def predict(self, X: np.ndarray) -> list[str]:
        return [self.classes[i] for i in self.predict_index(X)]


def _best_split(Xn: np.ndarray, yn: np.ndarray, n_classes: int, features: np.ndarray):
    """Best (feature, threshold, score) among ``features``; score = sum_c nL_c^2/nL + sum_c nR_c^2/nR.

    Maximizing the score minimizes the weighted Gini impurity of the children.
    Returns None when no feature separates the rows.
    """
    n = len(yn)
    V = Xn[:, features]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = np.take_along_axis(V, order, axis=0)
    Ys = yn[order]
    onehot = (Ys[:, :, None] == np.arange(n_classes)[None, None, :]).astype(np.float64)
    left = np.cumsum(onehot, axis=0)[:-1]
    total = left[-1] + onehot[-1]
    right = total[None] - left
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    score = (left ** 2).sum(axis=2) / n_left + (right ** 2).sum(axis=2) / n_right
    valid = Vs[:-1] < Vs[1:]
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    flat = score.T.reshape(-1)
    j = int(np.argmax(flat))
    fi, pos = divmod(j, n - 1)
    lo, hi = Vs[pos, fi], Vs[pos + 1, fi]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(features[fi]), float(thr), float(flat[j])


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_features: int,
              rng: np.random.Generator) -> DecisionTree:
    """Grow until nodes are pure or hold fewer than 2 rows."""
    d = X.shape[1]
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) < 2 or np.count_nonzero(counts[node]) <= 1:
            continue
        Xn, yn = X[idx], y[idx]
        perm = rng.permutation(d)
        split = None
        # like common implementations, keep drawing features while none separates the rows
        for start in range(0, d, max_features):
            split = _best_split(Xn, yn, n_classes, perm[start:start + max_features])
            if split is not None:
                break
        if split is None:
            continue
        f, thr, _ = split
        go_left = Xn[:, f] <= thr
        feature[node], threshold[node] = f, thr
        li, ri = new_node(idx[go_left]), new_node(idx[~go_left])
        left[node], right[node] = li, ri
        stack.append((ri, idx[~go_left]))
        stack.append((li, idx[go_left]))
    return DecisionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.int64),
    )


def _seed_tuple(seed) -> tuple:
    return tuple(int(s) for s in np.atleast_1d(seed))


def train_forest(X: np.ndarray, labels: Sequence[str], seed=0, n_trees: int = 100) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    if len(labels) == 0:
        raise ValueError("empty training set")
    if X.ndim != 2 or len(X) != len(labels):
        raise ValueError("features must be [n, d] with one label per row")
    classes = label_order(labels)
    if len(classes) < 2:
        raise ValueError(f"training data holds a single class ({classes[0]!r}); need at least 2")
    y = np.array([classes.index(l) for l in labels], dtype=np.int64)
    # canonical row order: lexicographic over feature columns, then label
    canon = np.lexsort(np.vstack([y[None, :], X.T[::-1]]))
    X, y = X[canon], y[canon]
    n, d = X.shape
    max_features = max(1, int(np.floor(np.sqrt(d))))
    seed = _seed_tuple(seed)
    trees = []
    for k in range(n_trees):
        rng = np.random.default_rng([*seed, k])
        boot = rng.integers(0, n, n)
        trees.append(grow_tree(X[boot], y[boot], len(classes), max_features, rng))
    return ForestModel(trees, classes, max_features, seed)


def predict(forest: ForestModel, vector: np.ndarray) -> str:
    return forest.predict(np.atleast_2d(vector))[0]
