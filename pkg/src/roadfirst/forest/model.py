"""CART trees and bagged random forests with probability leaves."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..dataset import Frame, SchemaError
from . import _kernels

FORMAT_NAME = "roadfirst-forest"
FORMAT_VERSION = 1
FLAVORS = ("combined_feature", "road_feature")


class ModelError(ValueError):
    pass


class FlavorError(ModelError):
    pass


def gini(class_counts: Sequence[int]) -> float:
    """Gini impurity ``1 - sum(p_c**2)`` of a node's class counts."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node is undefined")
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 5
    max_features: int | None = None  # None -> ceil(sqrt(p))
    seed: int = 0
    hard_vote: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def features_per_split(self, p: int) -> int:
        m = self.max_features if self.max_features is not None else math.ceil(math.sqrt(p))
        if not 1 <= m <= p:
            raise ValueError(f"features per split must be in [1, {p}], got {m}")
        return m


@dataclass(frozen=True)
class TreeNode:
    """Recursive view of a tree, for inspection and hand-traced checks."""

    feature: int
    threshold: float
    counts: tuple[int, int]
    left: TreeNode | None = None
    right: TreeNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def probability(self) -> float:
        return self.counts[1] / (self.counts[0] + self.counts[1])


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def probability(self) -> np.ndarray:
        return self.counts[:, 1] / self.counts.sum(axis=1)

    def leaf_values(self, hard_vote: bool = False) -> np.ndarray:
        p = self.probability
        return (p > 0.5).astype(np.float64) if hard_vote else p

    def to_node(self, i: int = 0) -> TreeNode:
        counts = (int(self.counts[i, 0]), int(self.counts[i, 1]))
        if self.feature[i] < 0:
            return TreeNode(-1, 0.0, counts)
        return TreeNode(int(self.feature[i]), float(self.threshold[i]), counts,
                        self.to_node(int(self.left[i])), self.to_node(int(self.right[i])))

    def predict(self, X: np.ndarray, hard_vote: bool = False) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        leaves = _kernels.leaf_index(X, self.feature, self.threshold, self.left, self.right, 0)
        return self.leaf_values(hard_vote)[leaves]

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Tree:
        tree = cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["counts"], dtype=np.int64).reshape(-1, 2),
        )
        tree.check()
        return tree

    def check(self, n_features: int | None = None) -> None:
        n = self.n_nodes
        if not (len(self.threshold) == len(self.left) == len(self.right) == len(self.counts) == n):
            raise ModelError("tree arrays have inconsistent lengths")
        internal = self.feature >= 0
        if np.any(self.counts < 0) or np.any(self.counts.sum(axis=1) == 0):
            raise ModelError("node class counts must be non-negative with a positive total")
        if np.any((self.left[internal] <= 0) | (self.left[internal] >= n)
                  | (self.right[internal] <= 0) | (self.right[internal] >= n)):
            raise ModelError("internal node child index out of range")
        if np.any(self.left[~internal] != -1) or np.any(self.right[~internal] != -1):
            raise ModelError("leaf nodes must have child index -1")
        if n_features is not None and np.any(self.feature >= n_features):
            raise ModelError("tree references a feature index beyond the feature list")


def fit_tree_arrays(X: np.ndarray, y: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> Tree:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a tree on zero rows")
    m = config.features_per_split(X.shape[1])
    state = np.uint64(rng.integers(0, 2**63, dtype=np.int64))
    depth = -1 if config.max_depth is None else config.max_depth
    return Tree(*_kernels.build_tree(X, y, depth, config.min_samples_leaf, m, state))


def _xy(frame: Frame, target: str, features: Sequence[str] | None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if features is None:
        features = [c.name for c in frame.schema.features()]
    features = list(features)
    for n in features:
        if frame.schema[n].is_string:
            raise SchemaError(f"feature {n!r} is not numeric; encode categoricals first")
    X = frame.matrix(features)
    if np.isnan(X).any():
        raise ValueError("training matrix has missing values; resolve them first")
    y = frame[target]
    return X, y.astype(np.int64), features


def fit_tree(
    train: Frame,
    target: str,
    config: TrainConfig,
    rng: np.random.Generator,
    features: Sequence[str] | None = None,
) -> Tree:
    """Fit a single CART tree on all rows of ``train`` (no bootstrap)."""
    X, y, _ = _xy(train, target, features)
    return fit_tree_arrays(X, y, config, rng)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for tree ``index``; depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass
class RandomForest:
    trees: list[Tree]
    config: TrainConfig
    features: list[str]
    feature_classes: list[str]
    flavor: str = "combined_feature"
    target: str = ""
    dataset_fingerprint: str = ""
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise FlavorError(f"unknown model flavor {self.flavor!r}")
        if len(self.features) != len(self.feature_classes):
            raise ModelError("features and feature_classes differ in length")
        for t in self.trees:
            t.check(len(self.features))
        check_flavor(self.flavor, self.features, self.feature_classes, self.trees)

    @property
    def n_features(self) -> int:
        return len(self.features)

    def flat(self) -> tuple:
        """All trees concatenated into single node arrays, plus per-tree root offsets."""
        if self._flat is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]]).astype(np.int64)
            shift = lambda a, o: np.where(a >= 0, a + o, -1)
            self._flat = (
                np.concatenate([t.feature for t in self.trees]),
                np.concatenate([t.threshold for t in self.trees]),
                np.concatenate([shift(t.left, o) for t, o in zip(self.trees, offsets)]),
                np.concatenate([shift(t.right, o) for t, o in zip(self.trees, offsets)]),
                np.concatenate([t.leaf_values(self.config.hard_vote) for t in self.trees]),
                offsets,
            )
        return self._flat

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ModelError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        return _kernels.predict_mean(X, *self.flat())

    __call__ = predict_matrix

    def design(self, data: Frame | Mapping[str, Any] | np.ndarray) -> np.ndarray:
        """Arrange a frame, a single row mapping, or an array into model column order."""
        if isinstance(data, Frame):
            missing = [n for n in self.features if n not in data]
            if missing:
                raise ModelError(f"frame lacks model feature {missing[0]!r}")
            return data.matrix(self.features)
        if isinstance(data, Mapping):
            missing = [n for n in self.features if n not in data]
            if missing:
                raise ModelError(f"row lacks model feature {missing[0]!r}")
            return np.array([[float(data[n]) for n in self.features]])
        X = np.asarray(data, dtype=np.float64)
        return X.reshape(1, -1) if X.ndim == 1 else X

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "flavor": self.flavor,
            "target": self.target,
            "features": list(self.features),
            "feature_classes": list(self.feature_classes),
            "config": asdict(self.config),
            "seed": self.config.seed,
            "dataset_fingerprint": self.dataset_fingerprint,
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RandomForest:
        if d.get("format") != FORMAT_NAME:
            raise ModelError(f"not a {FORMAT_NAME} document")
        if d.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {d.get('version')!r}")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            config=TrainConfig(**d["config"]),
            features=list(d["features"]),
            feature_classes=list(d["feature_classes"]),
            flavor=d["flavor"],
            target=d.get("target", ""),
            dataset_fingerprint=d.get("dataset_fingerprint", ""),
        )

    @classmethod
    def load(cls, path: str | Path) -> RandomForest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def check_flavor(flavor: str, features: Sequence[str], classes: Sequence[str], trees: Sequence[Tree] = ()) -> None:
    if flavor != "road_feature":
        return
    bad = [n for n, c in zip(features, classes) if c != "static_road"]
    if bad:
        raise FlavorError(f"road_feature model cannot use dynamic features: {bad}")
    for t in trees:
        used = t.feature[t.feature >= 0]
        if used.size and any(classes[i] != "static_road" for i in used):
            raise FlavorError("road_feature tree references a dynamic feature")


def fit_forest(
    train: Frame,
    target: str,
    config: TrainConfig,
    features: Sequence[str] | None = None,
    flavor: str = "combined_feature",
    workers: int = 1,
) -> RandomForest:
    """Bagged CART ensemble; tree ``t`` depends only on (data, config, seed, t)."""
    X, y, names = _xy(train, target, features)
    classes = [train.schema[n].feature_class for n in names]
    check_flavor(flavor, names, classes)
    if y.size == 0 or y.min() == y.max():
        raise ModelError(f"target {target!r} needs both classes to train a forest")
    X = np.ascontiguousarray(X)
    n = X.shape[0]
    config.features_per_split(X.shape[1])

    def grow(t: int) -> Tree:
        rng = tree_rng(config.seed, t)
        rows = rng.integers(0, n, size=n)
        return fit_tree_arrays(X[rows], y[rows], config, rng)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(grow, range(config.n_trees)))
    else:
        trees = [grow(t) for t in range(config.n_trees)]
    return RandomForest(trees, config, names, classes, flavor, target, train.fingerprint())


def bootstrap_rows(config: TrainConfig, n: int, index: int) -> np.ndarray:
    """In-bag row indices of tree ``index`` (same draw :func:`fit_forest` uses)."""
    return tree_rng(config.seed, index).integers(0, n, size=n)


def predict_proba(model: RandomForest, row: Frame | Mapping[str, Any] | np.ndarray) -> float | np.ndarray:
    """Class-1 confidence: mean leaf probability over trees (or vote share in hard-vote mode).

    A single mapping or 1-D array gives a float; a frame or 2-D array gives one value per row.
    """
    X = model.design(row)
    out = model.predict_matrix(X)
    single = isinstance(row, Mapping) or (isinstance(row, np.ndarray) and row.ndim == 1)
    return float(out[0]) if single else out


def evaluate(model: RandomForest, test: Frame, target: str, threshold: float = 0.5) -> dict[str, Any]:
    """Accuracy, precision, recall, F1 and confusion counts; positive means ``p > threshold``."""
    if test.n_rows == 0:
        raise ValueError("cannot evaluate on an empty test set")
    prob = predict_proba(model, test)
    return metrics_from_predictions(test[target], prob > threshold)


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, Any]:
    y_true = np.asarray(y_true) == 1
    y_pred = np.asarray(y_pred, dtype=bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    return {"confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn}, **metrics_from_confusion(tp, fp, tn, fn)}


def metrics_from_confusion(tp: int, fp: int, tn: int, fn: int) -> dict[str, float]:
    total = tp + fp + tn + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / total, "precision": precision, "recall": recall, "f1": f1}
