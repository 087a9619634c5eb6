"""Regression trees and bagged forests, written out in full.

Splits minimize the summed squared error of the two children (variance
reduction); thresholds are midpoints between consecutive distinct values and
ties go to the lowest feature index, then the lowest threshold.  Rows with
``x[feature] <= threshold`` go left.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FittingError, TrainingError, ValidationError
from .estimators import fit_linear
from .metrics import smape
from .placement import FEATURE_NAMES, TARGET_NAMES, WorkloadFeatures

INTEGER_TARGETS = ("n_star", "g_star")
FORMAT = "loratwin-forest"


@dataclass
class RegressionTree:
    feature: list[int]  # -1 for leaves
    threshold: list[float]
    left: list[int]
    right: list[int]
    value: list[float]
    n_samples: list[int]
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict_one(self, x: Sequence[float]) -> float:
        feature, threshold, left, right = self.feature, self.threshold, self.left, self.right
        i = 0
        f = feature[0]
        while f >= 0:
            i = left[i] if x[f] <= threshold[i] else right[i]
            f = feature[i]
        return self.value[i]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray([self.predict_one(row) for row in np.asarray(X, dtype=np.float64).tolist()])

    def leaf_index(self, x: Sequence[float]) -> int:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return i

    def to_json(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"value": self.value[i], "n_samples": self.n_samples[i]})
            else:
                nodes.append({"feature_index": self.feature[i], "threshold": self.threshold[i],
                              "left": self.left[i], "right": self.right[i],
                              "value": self.value[i], "n_samples": self.n_samples[i]})
        return {"max_depth": self.max_depth, "nodes": nodes}

    @classmethod
    def from_json(cls, doc: Mapping) -> "RegressionTree":
        t = cls([], [], [], [], [], [], int(doc["max_depth"]))
        for node in doc["nodes"]:
            leaf = "feature_index" not in node
            t.feature.append(-1 if leaf else int(node["feature_index"]))
            t.threshold.append(0.0 if leaf else float(node["threshold"]))
            t.left.append(-1 if leaf else int(node["left"]))
            t.right.append(-1 if leaf else int(node["right"]))
            t.value.append(float(node["value"]))
            t.n_samples.append(int(node["n_samples"]))
        return t


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int):
    """(feature, threshold, sse_after) of the best split, or None.

    Children SSE comes from prefix sums over the node-centred targets.
    """
    n = len(y)
    yc = y - y.mean()
    total = float(np.dot(yc, yc))
    best = None
    best_sse = total
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = yc[order]
        cs = np.cumsum(ys)
        cs2 = np.cumsum(ys * ys)
        # candidate positions: left = first k rows, k in [min_leaf, n - min_leaf], xs[k-1] < xs[k]
        k = np.arange(min_leaf, n - min_leaf + 1)
        if len(k) == 0:
            continue
        k = k[xs[k - 1] < xs[np.minimum(k, n - 1)]]
        k = k[k < n]
        if len(k) == 0:
            continue
        sl, sl2 = cs[k - 1], cs2[k - 1]
        sr, sr2 = cs[-1] - sl, cs2[-1] - sl2
        sse = (sl2 - sl * sl / k) + (sr2 - sr * sr / (n - k))
        j = int(np.argmin(sse))  # first minimum -> lowest threshold
        if sse[j] < best_sse:
            kk = int(k[j])
            best_sse = float(sse[j])
            best = (int(f), float((xs[kk - 1] + xs[kk]) / 2.0), best_sse)
    # guard against splits that only remove rounding noise
    if best is not None and not total - best[2] > 1e-12 * max(total, 1.0):
        return None
    return best


def train_tree(X, y, max_depth: int = 5, min_leaf: int = 1, feature_subset_size: int | None = None,
               seed: int = 0) -> RegressionTree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise TrainingError("training rows must be a non-empty 2-D array")
    if len(y) != len(X):
        raise TrainingError("feature and target row counts differ")
    if max_depth < 1:
        raise TrainingError("max_depth must be >= 1")
    if min_leaf < 1 or len(y) < min_leaf:
        raise TrainingError(f"need at least min_leaf={min_leaf} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise TrainingError("non-finite training data")
    n_features = X.shape[1]
    subset = n_features if feature_subset_size is None else int(feature_subset_size)
    if not 1 <= subset <= n_features:
        raise TrainingError(f"feature_subset_size must be in [1, {n_features}]")
    rng = np.random.default_rng(seed)
    tree = RegressionTree([], [], [], [], [], [], max_depth)

    def add(idx) -> int:
        node = tree.n_nodes
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append(float(y[idx].mean()))
        tree.n_samples.append(int(len(idx)))
        return node

    def grow(idx, depth):
        node = add(idx)
        yy = y[idx]
        if depth >= max_depth or len(idx) < 2 * min_leaf or yy.max() == yy.min():
            return node
        if subset < n_features:
            feats = np.sort(rng.choice(n_features, size=subset, replace=False))
        else:
            feats = range(n_features)
        split = best_split(X[idx], yy, feats, min_leaf)
        if split is None:
            return node
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = grow(idx[go_left], depth + 1)
        tree.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return tree


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    target: str
    feature_names: tuple[str, ...] = FEATURE_NAMES
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= len(self.trees) <= 10:
            raise ValidationError("trees", "a forest holds 1 to 10 trees")

    def predict_raw(self, x: Sequence[float]) -> float:
        total = 0.0
        for t in self.trees:
            total += t.predict_one(x)
        return total / len(self.trees)

    def predict_matrix(self, X) -> np.ndarray:
        rows = np.asarray(X, dtype=np.float64).tolist()
        return np.asarray([finalize(self.target, self.predict_raw(r)) for r in rows])

    def to_json(self) -> dict:
        return {"target": self.target, "feature_names": list(self.feature_names),
                "training_meta": self.training_meta, "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ForestModel":
        return cls([RegressionTree.from_json(t) for t in doc["trees"]], doc["target"],
                   tuple(doc["feature_names"]), dict(doc.get("training_meta", {})))


def finalize(target: str, value: float):
    if target in INTEGER_TARGETS:
        return max(1, int(math.floor(value + 0.5)))
    return value


def train_forest(X, y, target: str = "max_throughput", n_trees: int = 10, max_depth: int = 5,
                 min_leaf: int = 1, feature_subset_size: int | None = None, seed: int = 0,
                 bootstrap: bool = True, feature_names: Sequence[str] = FEATURE_NAMES,
                 dataset_hash: str | None = None) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) < max(min_leaf, 1):
        raise TrainingError(f"fewer rows ({len(X)}) than min_leaf ({min_leaf})")
    if not 1 <= n_trees <= 10:
        raise TrainingError("n_trees must be in [1, 10]")
    if X.ndim != 2 or X.shape[1] != len(feature_names):
        raise TrainingError(f"expected {len(feature_names)} feature columns")
    seeds = np.random.SeedSequence([seed, TARGET_NAMES.index(target) if target in TARGET_NAMES else 99])
    trees = []
    for child in seeds.spawn(n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, len(y), size=len(y)) if bootstrap else np.arange(len(y))
        tree_seed = int(rng.integers(0, 2**63 - 1))
        trees.append(train_tree(X[idx], y[idx], max_depth, min_leaf, feature_subset_size, tree_seed))
    meta = {"seed": seed, "n_trees": n_trees, "max_depth": max_depth, "min_leaf": min_leaf,
            "feature_subset_size": feature_subset_size, "bootstrap": bootstrap,
            "bootstrap_fraction": 1.0 if bootstrap else None, "n_rows": int(len(y)),
            "dataset_hash": dataset_hash or array_hash(X, y)}
    return ForestModel(trees, target, tuple(feature_names), meta)


def array_hash(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
    return h.hexdigest()


def _feature_vector(model: ForestModel, f) -> list[float]:
    if isinstance(f, WorkloadFeatures):
        f = f.as_dict()
    if isinstance(f, Mapping):
        try:
            return [float(f[name]) for name in model.feature_names]
        except KeyError as exc:
            raise ValidationError(f"features.{exc.args[0]}", "missing feature") from None
    vec = list(f)
    if len(vec) != len(model.feature_names):
        raise ValidationError("features", f"expected {len(model.feature_names)} values, got {len(vec)}")
    return vec


def predict(model: ForestModel, f):
    """Mean of the tree outputs; N* and G* are rounded and at least 1."""
    return finalize(model.target, model.predict_raw(_feature_vector(model, f)))


# --------------------------------------------------------------------------
# bundles of the three forests


@dataclass
class PlacementModel:
    forests: dict[str, ForestModel]
    evaluation: dict = field(default_factory=dict)

    def predict(self, f) -> dict:
        return {t: predict(m, f) for t, m in self.forests.items()}

    def to_json(self) -> dict:
        doc = {"format": FORMAT, "version": 1,
               "forests": {t: m.to_json() for t, m in self.forests.items()}}
        if self.evaluation:
            doc["evaluation"] = self.evaluation
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "PlacementModel":
        from .schemas import validate

        validate(doc, "forest_model")
        return cls({t: ForestModel.from_json(m) for t, m in doc["forests"].items()},
                   dict(doc.get("evaluation", {})))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PlacementModel":
        with Path(path).open() as fh:
            return cls.from_json(json.load(fh))


def train_placement_model(X, targets: Mapping[str, np.ndarray], seed: int = 0, **kwargs) -> PlacementModel:
    ds = array_hash(np.asarray(X), np.concatenate([np.asarray(targets[t], dtype=float) for t in targets]))
    return PlacementModel({t: train_forest(X, targets[t], target=t, seed=seed, dataset_hash=ds, **kwargs)
                           for t in targets})


# --------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class Rule:
    tree: int
    leaf: int
    conditions: tuple[tuple[int, str, float], ...]  # (feature index, "<=" or ">", threshold)
    value: float
    coverage: int

    def matches(self, x: Sequence[float]) -> bool:
        for f, op, thr in self.conditions:
            if (x[f] <= thr) != (op == "<="):
                return False
        return True

    def text(self, names: Sequence[str], target: str = "value") -> str:
        if self.conditions:
            cond = " and ".join(f"{names[f]} {op} {thr:.6g}" for f, op, thr in self.conditions)
        else:
            cond = "always"
        return f"tree {self.tree}: if {cond} then {target} = {self.value:.6g}  (covers {self.coverage})"


def extract_rules(model: ForestModel) -> list[Rule]:
    """One rule per root-to-leaf path of every tree."""
    rules = []
    for ti, tree in enumerate(model.trees):
        stack = [(0, ())]
        while stack:
            node, conds = stack.pop()
            f = tree.feature[node]
            if f < 0:
                rules.append(Rule(ti, node, conds, tree.value[node], tree.n_samples[node]))
                continue
            thr = tree.threshold[node]
            stack.append((tree.right[node], conds + ((f, ">", thr),)))
            stack.append((tree.left[node], conds + ((f, "<=", thr),)))
    return rules


# --------------------------------------------------------------------------
# linear baseline


@dataclass
class LinearModel:
    target: str
    columns: list[int]  # feature indices kept
    coef: np.ndarray  # per kept column, then intercept

    def predict_raw(self, x: Sequence[float]) -> float:
        return float(sum(self.coef[i] * x[c] for i, c in enumerate(self.columns)) + self.coef[-1])

    def predict_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        raw = X[:, self.columns] @ self.coef[:-1] + self.coef[-1]
        return np.asarray([finalize(self.target, float(v)) for v in raw])


def train_linear_baseline(X, y, target: str = "max_throughput",
                          feature_names: Sequence[str] = FEATURE_NAMES) -> LinearModel:
    """Least squares on the features plus an intercept.

    Constant columns (collinear with the intercept) are dropped first, then
    any column that is a linear combination of the ones already kept.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) < X.shape[1] + 1:
        raise FittingError(f"need at least {X.shape[1] + 1} rows, got {len(X)}")
    kept: list[int] = []
    ones = np.ones((len(X), 1))
    basis = ones
    rank = 1
    for c in range(X.shape[1]):
        col = X[:, [c]]
        if np.ptp(col) == 0:
            continue
        trial = np.hstack([basis, col])
        r = np.linalg.matrix_rank(trial)
        if r > rank:
            kept.append(c)
            basis, rank = trial, r
    design = np.hstack([X[:, kept], ones]) if kept else ones
    names = [feature_names[c] for c in kept] + ["intercept"]
    coef = fit_linear(list(zip(design.tolist(), y.tolist())), names)
    return LinearModel(target, kept, np.asarray(coef))


def evaluate(model, X, y) -> float:
    """SMAPE (%) of a forest or linear model on rows ``X`` against ``y``."""
    return smape(model.predict_matrix(X), y)
