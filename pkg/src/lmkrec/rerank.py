"""Gradient-boosted regression trees with logistic loss, for re-ranking.

Trees are grown depth-first with exact greedy splits. A sample goes left
when ``x[feature] <= threshold``. Equal-gain candidates resolve to the
lowest feature index, then the lowest threshold, so training is fully
deterministic for a given input order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateLabelError, FormatError, ParamError

MODEL_FORMAT = "lmkrec-rerank-trees"
PROB_FLOOR = 1e-6


@dataclass
class Tree:
    """Flat node arrays; leaves have feature == -1 and left == right == -1."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add_node(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        active = feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, feature[n]] <= threshold[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return np.asarray(self.value)[node]

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"feature": f, "threshold": t, "left": l, "right": r, "value": v}
                for f, t, l, r, v in zip(self.feature, self.threshold, self.left, self.right, self.value)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        t = cls()
        for node in d["nodes"]:
            t.feature.append(int(node["feature"]))
            t.threshold.append(float(node["threshold"]))
            t.left.append(int(node["left"]))
            t.right.append(int(node["right"]))
            t.value.append(float(node["value"]))
        return t


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class TreeModel:
    """Additive tree ensemble on the log-odds scale.

    ``base_score`` is a probability; the model output is
    sigmoid(logit(base_score) + sum_i shrinkage_i * tree_i(x)), in [0, 1].
    """

    n_features: int
    base_score: float
    trees: list = field(default_factory=list)
    shrinkage: list = field(default_factory=list)
    feature_names: Optional[list] = None

    def validate(self) -> None:
        if not 0.0 < self.base_score < 1.0:
            raise FormatError(f"base score {self.base_score} outside (0, 1)")
        if len(self.trees) != len(self.shrinkage):
            raise FormatError("one shrinkage value per tree required")
        for tree in self.trees:
            for f, thr, l, r in zip(tree.feature, tree.threshold, tree.left, tree.right):
                if f >= 0:
                    if f >= self.n_features or not math.isfinite(thr):
                        raise FormatError(f"invalid split on feature {f} at {thr}")
                    if not (0 < l < len(tree.feature) and 0 < r < len(tree.feature)):
                        raise FormatError("child index out of range")

    def margin(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ParamError(f"expected (n, {self.n_features}) features, got {X.shape}")
        p = self.base_score
        out = np.full(X.shape[0], math.log(p / (1.0 - p)))
        for tree, eta in zip(self.trees, self.shrinkage):
            out += eta * tree.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        if not self.trees:
            X = np.asarray(X, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != self.n_features:
                raise ParamError(f"expected (n, {self.n_features}) features, got {X.shape}")
            return np.full(X.shape[0], self.base_score)
        return np.clip(_sigmoid(self.margin(X)), 0.0, 1.0)

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "version": 1,
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "base_score": self.base_score,
            "trees": [dict(t.to_dict(), shrinkage=eta) for t, eta in zip(self.trees, self.shrinkage)],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TreeModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"re-rank model is not valid JSON: {exc}") from exc
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != 1:
            raise FormatError("not a version-1 re-rank tree model")
        model = cls(
            n_features=int(doc["n_features"]),
            base_score=float(doc["base_score"]),
            trees=[Tree.from_dict(t) for t in doc["trees"]],
            shrinkage=[float(t["shrinkage"]) for t in doc["trees"]],
            feature_names=doc.get("feature_names"),
        )
        model.validate()
        return model


@dataclass(frozen=True)
class TreeHyper:
    n_trees: int = 100
    depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 5
    reg_lambda: float = 1.0
    # without a gain floor, 100 depth-3 trees memorize random labels
    min_gain: float = 2.0

    def __post_init__(self):
        if self.n_trees < 0 or not 1 <= self.depth <= 3 or self.min_leaf < 1:
            raise ParamError("need n_trees >= 0, 1 <= depth <= 3, min_leaf >= 1")
        if not self.shrinkage > 0 or self.reg_lambda < 0 or self.min_gain < 0:
            raise ParamError("shrinkage must be > 0, reg_lambda and min_gain >= 0")


def _best_split(X, g, h, rows, orders, hyper: TreeHyper):
    """Return (gain, feature, threshold) of the best split of ``rows``, or None."""
    lam = hyper.reg_lambda
    in_node = np.zeros(X.shape[0], dtype=bool)
    in_node[rows] = True
    G, H = g[rows].sum(), h[rows].sum()
    parent = G * G / (H + lam)
    best = None
    n = rows.size
    if n < 2 * hyper.min_leaf:
        return None
    for f in range(X.shape[1]):
        order = orders[f][in_node[orders[f]]]
        xs = X[order, f]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= hyper.min_leaf) & (n - n_left >= hyper.min_leaf)
        if not valid.any():
            continue
        gr, hr = G - gl, H - hl
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
        gain = np.where(valid, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > hyper.min_gain and (best is None or gain[pos] > best[0]):
            lo, hi = xs[pos], xs[pos + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = (float(gain[pos]), f, float(thr))
    return best


def _grow(X, g, h, orders, hyper: TreeHyper) -> Tree:
    tree = Tree()
    lam = hyper.reg_lambda

    def build(rows, depth):
        G, H = g[rows].sum(), h[rows].sum()
        node = tree.add_node(value=-G / (H + lam))
        split = _best_split(X, g, h, rows, orders, hyper) if depth < hyper.depth else None
        if split is None:
            return node
        _, f, thr = split
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.value[node] = 0.0
        mask = X[rows, f] <= thr
        tree.left[node] = build(rows[mask], depth + 1)
        tree.right[node] = build(rows[~mask], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return tree


def train_rerank_tree(features, labels, hyper: TreeHyper = TreeHyper(),
                      feature_names: Optional[Sequence[str]] = None) -> TreeModel:
    """Fit a boosted tree ensemble to binary labels with logistic loss."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ParamError(f"features {X.shape} do not align with {y.shape[0]} labels")
    if not np.all(np.isfinite(X)):
        raise ParamError("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ParamError("labels must be 0/1")
    if np.unique(y).size < 2:
        raise DegenerateLabelError("re-rank training needs both correct and incorrect rows")

    base = float(np.clip(y.mean(), PROB_FLOOR, 1.0 - PROB_FLOOR))
    model = TreeModel(n_features=X.shape[1], base_score=base,
                      feature_names=list(feature_names) if feature_names is not None else None)
    orders = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    margin = np.full(X.shape[0], math.log(base / (1.0 - base)))
    for _ in range(hyper.n_trees):
        p = _sigmoid(margin)
        g = p - y
        h = np.maximum(p * (1.0 - p), 1e-16)
        tree = _grow(X, g, h, orders, hyper)
        model.trees.append(tree)
        model.shrinkage.append(hyper.shrinkage)
        margin = margin + hyper.shrinkage * tree.predict(X)
    return model


def apply_rerank(model: TreeModel, features) -> np.ndarray:
    return model.predict(features)


def save_model(model: TreeModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model.to_json())
        fh.write("\n")


def load_model(path) -> TreeModel:
    with open(path, encoding="utf-8") as fh:
        return TreeModel.from_json(fh.read())
