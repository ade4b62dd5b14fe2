"""Shapley-value attributions for tree ensembles and arbitrary predictors.

Both explainers share one value function: for a coalition ``S`` the model
is evaluated on hybrid rows that take the explained row's values on ``S``
and a background row's values elsewhere, averaged over the background set.
:func:`exact_shap` enumerates every coalition and serves as the reference;
:func:`tree_shap` computes the same numbers by walking each tree.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Frame
from .forest import _kernels
from .forest.model import ModelError, RandomForest

MAX_EXACT_FEATURES = 15
DEFAULT_BACKGROUND = 128

Predictor = Callable[[np.ndarray], np.ndarray]


class ExactShapRefused(ValueError):
    pass


@dataclass
class ShapValues:
    """Attributions for a set of rows.

    ``values[r, j]`` is feature ``j``'s contribution to row ``r``; ``base`` is
    the mean model output over the background, so
    ``values[r].sum() + base == output[r]``.
    """

    values: np.ndarray
    base: float
    features: list[str]
    data: np.ndarray
    output: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def efficiency_gap(self) -> np.ndarray:
        return np.abs(self.values.sum(axis=1) + self.base - self.output)


def _as_predictor(model) -> Predictor:
    if isinstance(model, RandomForest):
        return model.predict_matrix
    if hasattr(model, "predict"):
        return lambda X: np.asarray(model.predict(X), dtype=np.float64)
    if callable(model):
        return lambda X: np.asarray(model(X), dtype=np.float64)
    raise TypeError("model must be a RandomForest, expose predict(), or be callable")


def _rows(data, features: Sequence[str] | None) -> np.ndarray:
    if isinstance(data, Frame):
        if features is None:
            raise ValueError("pass feature names to explain a Frame")
        return data.matrix(list(features))
    X = np.asarray(data, dtype=np.float64)
    return X.reshape(1, -1) if X.ndim == 1 else X


def sample_background(X: np.ndarray, size: int = DEFAULT_BACKGROUND, seed: int = 0) -> np.ndarray:
    """Up to ``size`` rows drawn without replacement, kept in original order."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] <= size:
        return X.copy()
    rng = np.random.default_rng([seed, 0x42474E44])
    return X[np.sort(rng.choice(X.shape[0], size=size, replace=False))]


def shapley_weights(n_features: int) -> np.ndarray:
    """``w[s] = s! (n - s - 1)! / n!`` for coalition sizes ``s = 0 .. n-1``."""
    n = n_features
    f = math.factorial
    return np.array([float(Fraction(f(s) * f(n - s - 1), f(n))) for s in range(n)])


def exact_shap(model, row, background, features: Sequence[str] | None = None) -> ShapValues:
    """Brute-force Shapley values by enumerating all ``2**p`` coalitions.

    Refuses more than 15 features; use :func:`tree_shap` for forests.
    """
    predict = _as_predictor(model)
    if features is None and isinstance(model, RandomForest):
        features = model.features
    x = _rows(row, features)
    Z = _rows(background, features)
    if x.shape[0] != 1:
        raise ValueError("exact_shap explains one row at a time")
    x = x[0]
    p = x.shape[0]
    if p > MAX_EXACT_FEATURES:
        raise ExactShapRefused(
            f"exact Shapley enumeration is limited to {MAX_EXACT_FEATURES} features "
            f"(got {p}); use tree_shap for tree ensembles"
        )
    if Z.shape[0] == 0:
        raise ValueError("background set is empty")
    if Z.shape[1] != p:
        raise ModelError(f"background has {Z.shape[1]} features, row has {p}")

    n_masks = 1 << p
    bits = ((np.arange(n_masks)[:, None] >> np.arange(p)) & 1).astype(bool)
    value = np.empty(n_masks)
    per_chunk = max(1, 200_000 // (Z.shape[0] * max(p, 1)))
    for start in range(0, n_masks, per_chunk):
        masks = bits[start:start + per_chunk]
        hybrid = np.where(masks[:, None, :], x[None, None, :], Z[None, :, :])
        out = predict(hybrid.reshape(-1, p)).reshape(masks.shape[0], Z.shape[0])
        value[start:start + masks.shape[0]] = out.mean(axis=1)

    weights = shapley_weights(p) if p else np.zeros(0)
    sizes = bits.sum(axis=1)
    phi = np.zeros(p)
    for i in range(p):
        without = np.flatnonzero(~bits[:, i])
        with_i = without | (1 << i)
        phi[i] = np.sum(weights[sizes[without]] * (value[with_i] - value[without]))
    return ShapValues(phi[None, :], float(value[0]), list(features or [f"x{j}" for j in range(p)]),
                      x[None, :].copy(), np.array([value[-1]]))


def _path_weights(p: int) -> tuple[np.ndarray, np.ndarray]:
    f = math.factorial
    w_pos = np.zeros((p + 2, p + 2))
    w_neg = np.zeros((p + 2, p + 2))
    for a in range(p + 1):
        for b in range(p + 1 - a):
            if a >= 1:
                w_pos[a, b] = float(Fraction(f(a - 1) * f(b), f(a + b)))
            if b >= 1:
                w_neg[a, b] = float(Fraction(f(a) * f(b - 1), f(a + b)))
    return w_pos, w_neg


def _tree_phi(tree, X, Z, hard_vote, w_pos, w_neg) -> np.ndarray:
    return _kernels.tree_shap_rows(X, Z, tree.feature, tree.threshold, tree.left, tree.right,
                                   tree.leaf_values(hard_vote), 0, w_pos, w_neg)


def tree_shap(model: RandomForest, rows, background, workers: int = 1,
              per_tree: bool = False) -> ShapValues | list[np.ndarray]:
    """Interventional Shapley values of a forest, averaged over its trees.

    ``per_tree=True`` returns the list of per-tree attribution matrices instead.
    """
    if not model.trees:
        raise ModelError("model has no trees")
    X = np.ascontiguousarray(model.design(rows), dtype=np.float64)
    Z = np.ascontiguousarray(model.design(background), dtype=np.float64)
    p = model.n_features
    if X.shape[1] != p or Z.shape[1] != p:
        raise ModelError(f"model has {p} features; rows have {X.shape[1]}, background {Z.shape[1]}")
    if Z.shape[0] == 0:
        raise ValueError("background set is empty")
    w_pos, w_neg = _path_weights(p)
    hard = model.config.hard_vote

    def rows_block(block: np.ndarray) -> list[np.ndarray]:
        return [_tree_phi(t, block, Z, hard, w_pos, w_neg) for t in model.trees]

    chunks = [X[i:i + 64] for i in range(0, X.shape[0], 64)] or [X]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(rows_block, chunks))
    else:
        parts = [rows_block(c) for c in chunks]
    per = [np.concatenate([part[t] for part in parts], axis=0) for t in range(len(model.trees))]
    if per_tree:
        return per
    total = np.zeros_like(per[0])
    for m in per:
        total += m
    phi = total / len(per)
    base = float(model.predict_matrix(Z).mean())
    return ShapValues(phi, base, list(model.features), X.copy(), model.predict_matrix(X))


@dataclass
class ShapSummary:
    features: list[str]
    mean_abs: np.ndarray
    ranking: list[str]
    values: np.ndarray  # (n_rows, n_features) feature values
    phi: np.ndarray  # (n_rows, n_features)

    def rank_of(self, feature: str) -> int:
        return self.ranking.index(feature) + 1

    def top(self, k: int) -> list[str]:
        return self.ranking[:k]


def summarize(shap: ShapValues, frame: Frame | None = None) -> ShapSummary:
    """Mean |phi| per feature, ranked descending (ties by feature name)."""
    if shap.n_rows == 0:
        raise ValueError("no rows to summarize")
    data = frame.matrix(shap.features) if frame is not None else shap.data
    mean_abs = np.abs(shap.values).mean(axis=0)
    order = sorted(range(len(shap.features)), key=lambda j: (-mean_abs[j], shap.features[j]))
    return ShapSummary(list(shap.features), mean_abs, [shap.features[j] for j in order],
                       np.asarray(data, dtype=np.float64), shap.values)


def dependence_slice(summary: ShapSummary, feature: str) -> list[tuple[float, float]]:
    """(feature value, phi) pairs for every explained row, sorted by value."""
    if feature not in summary.features:
        raise KeyError(f"unknown feature {feature!r}")
    j = summary.features.index(feature)
    pairs = zip(summary.values[:, j].tolist(), summary.phi[:, j].tolist())
    return sorted(pairs)


def write_shap_csv(shap: ShapValues, path: str | Path, row_ids: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = list(row_ids) if row_ids is not None else [str(i) for i in range(shap.n_rows)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "feature", "value", "phi"])
        for r in range(shap.n_rows):
            for j, name in enumerate(shap.features):
                w.writerow([ids[r], name, repr(float(shap.data[r, j])), repr(float(shap.values[r, j]))])


def write_summary_csv(summary: ShapSummary, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    idx = {n: j for j, n in enumerate(summary.features)}
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean_abs_phi", "rank"])
        for rank, name in enumerate(summary.ranking, start=1):
            w.writerow([name, repr(float(summary.mean_abs[idx[name]])), rank])


def read_shap_csv(path: str | Path) -> ShapSummary:
    """Rebuild a summary from a long-format SHAP export."""
    rows: dict[str, dict[str, tuple[float, float]]] = {}
    features: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            if rec["feature"] not in features:
                features.append(rec["feature"])
            rows.setdefault(rec["row_id"], {})[rec["feature"]] = (float(rec["value"]), float(rec["phi"]))
    ids = list(rows)
    values = np.array([[rows[i][f][0] for f in features] for i in ids]).reshape(len(ids), len(features))
    phi = np.array([[rows[i][f][1] for f in features] for i in ids]).reshape(len(ids), len(features))
    sv = ShapValues(phi, 0.0, features, values, phi.sum(axis=1))
    return summarize(sv)


def plot_summary(summary: ShapSummary, out_dir: str | Path, top: int = 20,
                 dependence: Sequence[str] = ()) -> list[Path]:
    """Write SVG charts: mean-|phi| bars, a beeswarm-style strip plot, and dependence scatters."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "roadfirst"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shown = summary.ranking[:top]
    idx = {n: j for j, n in enumerate(summary.features)}
    written = []

    fig, ax = plt.subplots(figsize=(7, 0.3 * len(shown) + 1.5))
    ax.barh(range(len(shown))[::-1], [summary.mean_abs[idx[n]] for n in shown], color="#3b6ea8")
    ax.set_yticks(range(len(shown))[::-1], shown, fontsize=8)
    ax.set_xlabel("mean |SHAP value|")
    fig.tight_layout()
    written.append(out_dir / "shap_importance.svg")
    fig.savefig(written[-1], metadata={"Date": None})
    plt.close(fig)

    rng = np.random.default_rng(0)
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(shown) + 1.5))
    for pos, name in enumerate(shown):
        j = idx[name]
        v = summary.values[:, j]
        span = np.ptp(v) or 1.0
        jitter = rng.uniform(-0.3, 0.3, size=v.size)
        ax.scatter(summary.phi[:, j], np.full(v.size, len(shown) - 1 - pos) + jitter,
                   c=(v - v.min()) / span, cmap="coolwarm", s=4, vmin=0, vmax=1)
    ax.axvline(0, color="grey", lw=0.5)
    ax.set_yticks(range(len(shown))[::-1], shown, fontsize=8)
    ax.set_xlabel("SHAP value (impact on model output)")
    fig.tight_layout()
    written.append(out_dir / "shap_beeswarm.svg")
    fig.savefig(written[-1], metadata={"Date": None})
    plt.close(fig)

    for name in dependence:
        pairs = dependence_slice(summary, name)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter([a for a, _ in pairs], [b for _, b in pairs], s=4, color="#3b6ea8")
        ax.axhline(0, color="grey", lw=0.5)
        ax.set_xlabel(name)
        ax.set_ylabel("SHAP value")
        fig.tight_layout()
        safe = "".join(ch if ch.isalnum() else "_" for ch in name)
        written.append(out_dir / f"dependence_{safe}.svg")
        fig.savefig(written[-1], metadata={"Date": None})
        plt.close(fig)
    return written
