"""Variance inflation factors and iterative multicollinearity reduction."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.linalg

from .dataset import Frame, SchemaError, dummy_groups
from .runlog import RunLog, emit

RANK_RTOL = 1e-10
# 1 - R^2 at or below this counts as exact collinearity
EXACT_TOL = 1e-10
REASONS = ("pairwise-correlation", "dummy-sibling-max", "vif-over-threshold")


class RankDeficiencyError(ValueError):
    pass


class ReductionError(RuntimeError):
    """Raised when ``max_iters`` runs out; ``.log`` holds the partial log."""

    def __init__(self, message: str, log: ReductionLog):
        super().__init__(message)
        self.log = log


def _num(x: float) -> float | str:
    return "inf" if math.isinf(x) else x


def _unnum(x: float | str) -> float:
    return math.inf if x == "inf" else float(x)


def feature_names(frame: Frame) -> list[str]:
    names = [c.name for c in frame.schema.features()]
    cats = [c.name for c in frame.schema.features() if c.role == "categorical"]
    if cats:
        raise SchemaError(f"encode categorical columns before VIF analysis: {cats}")
    return names


def r_squared(y: np.ndarray, X: np.ndarray) -> float:
    """R^2 of ``y`` regressed on ``X`` plus an intercept.

    Least squares goes through a column-pivoted QR factorization; columns
    whose pivot falls below ``RANK_RTOL`` of the leading pivot are treated as
    dependent and left out of the projection.
    """
    n = y.shape[0]
    A = np.column_stack([np.ones(n), X])
    Q, R, _ = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag.size else 0
    Qr = Q[:, :rank]
    resid = y - Qr @ (Qr.T @ y)
    ss_res = float(resid @ resid)
    centered = y - y.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        return 1.0
    return min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)


def vif_from_r2(r2: float) -> float:
    if 1.0 - r2 <= EXACT_TOL:
        return math.inf
    return 1.0 / (1.0 - r2)


def _check_shape(n_rows: int, n_cols: int) -> None:
    if n_cols < 2:
        raise ValueError(f"VIF needs at least 2 feature columns, got {n_cols}")
    if n_rows <= n_cols:
        raise RankDeficiencyError(
            f"VIF needs more rows than feature columns ({n_rows} rows, {n_cols} columns)"
        )


def vif(frame: Frame, column: str, columns: Sequence[str] | None = None) -> tuple[float, float]:
    """Return ``(R^2, VIF)`` for ``column`` regressed on the other feature columns.

    Exact collinearity returns R^2 = 1 and VIF = ``math.inf``.
    """
    names = list(columns) if columns is not None else feature_names(frame)
    if column not in names:
        raise KeyError(f"{column!r} is not a feature column")
    _check_shape(frame.n_rows, len(names))
    X = frame.matrix(names)
    j = names.index(column)
    r2 = r_squared(X[:, j], np.delete(X, j, axis=1))
    v = vif_from_r2(r2)
    return (1.0 if math.isinf(v) else r2), v


@dataclass
class VifReport:
    names: list[str]
    r2: list[float]
    vif: list[float]

    def __getitem__(self, name: str) -> float:
        return self.vif[self.names.index(name)]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.vif))

    def to_dict(self) -> dict[str, Any]:
        return {
            "columns": [
                {"name": n, "r2": r, "vif": _num(v)} for n, r, v in zip(self.names, self.r2, self.vif)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> VifReport:
        cols = d["columns"]
        return cls([c["name"] for c in cols], [c["r2"] for c in cols], [_unnum(c["vif"]) for c in cols])


def vif_report(frame: Frame, columns: Sequence[str] | None = None, workers: int = 1) -> VifReport:
    names = list(columns) if columns is not None else feature_names(frame)
    _check_shape(frame.n_rows, len(names))
    X = frame.matrix(names)

    def one(j: int) -> tuple[float, float]:
        r2 = r_squared(X[:, j], np.delete(X, j, axis=1))
        v = vif_from_r2(r2)
        return (1.0 if math.isinf(v) else r2), v

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(names))))
    else:
        results = [one(j) for j in range(len(names))]
    return VifReport(names, [r for r, _ in results], [v for _, v in results])


@dataclass
class CorrelationMatrix:
    names: list[str]
    values: np.ndarray
    zero_variance: list[str]


def correlation_matrix(frame: Frame, columns: Sequence[str] | None = None) -> CorrelationMatrix:
    """Pearson correlations; zero-variance columns get 0 off the diagonal and are flagged."""
    names = list(columns) if columns is not None else feature_names(frame)
    X = frame.matrix(names)
    Xc = X - X.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", Xc, Xc))
    flat = norms == 0.0
    safe = np.where(flat, 1.0, norms)
    Z = Xc / safe
    C = Z.T @ Z
    C = np.clip((C + C.T) / 2.0, -1.0, 1.0)
    C[flat, :] = 0.0
    C[:, flat] = 0.0
    np.fill_diagonal(C, 1.0)
    return CorrelationMatrix(names, C, [n for n, f in zip(names, flat) if f])


@dataclass
class ReductionAction:
    column: str
    reason: str
    iteration: int
    statistic: float
    partner: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "column": self.column,
            "reason": self.reason,
            "iteration": self.iteration,
            "statistic": _num(self.statistic),
        }
        if self.partner is not None:
            d["partner"] = self.partner
        return d


@dataclass
class ReductionLog:
    vif_threshold: float
    corr_threshold: float
    actions: list[ReductionAction] = field(default_factory=list)
    iterations: int = 0
    final: VifReport | None = None

    @property
    def removed(self) -> list[str]:
        return [a.column for a in self.actions]

    def replay(self, frame: Frame) -> Frame:
        out = frame
        for a in self.actions:
            out = out.drop([a.column])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "vif_threshold": self.vif_threshold,
            "corr_threshold": self.corr_threshold,
            "iterations": self.iterations,
            "actions": [a.to_dict() for a in self.actions],
            "final_vif": self.final.to_dict() if self.final is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ReductionLog:
        actions = [
            ReductionAction(a["column"], a["reason"], a["iteration"], _unnum(a["statistic"]), a.get("partner"))
            for a in d["actions"]
        ]
        final = VifReport.from_dict(d["final_vif"]) if d.get("final_vif") else None
        return cls(d["vif_threshold"], d["corr_threshold"], actions, d["iterations"], final)


def _victim_key(frame: Frame, name: str) -> tuple:
    # sorts the preferred removal first: lower priority, then later name
    return (frame.schema[name].priority, _Reverse(name))


class _Reverse:
    __slots__ = ("s",)

    def __init__(self, s: str):
        self.s = s

    def __lt__(self, other: _Reverse) -> bool:
        return self.s > other.s

    def __eq__(self, other: object) -> bool:
        return isinstance(other, _Reverse) and self.s == other.s


def reduce_multicollinearity(
    frame: Frame,
    vif_threshold: float = 10.0,
    corr_threshold: float = 0.95,
    max_iters: int = 100,
    workers: int = 1,
    log: RunLog | None = None,
) -> tuple[Frame, ReductionLog]:
    """Remove columns until no pair reaches ``corr_threshold`` and every VIF is below ``vif_threshold``.

    Each iteration recomputes correlations and VIFs on the surviving columns,
    then applies the first rule that fires:

    1. the most correlated pair at or above ``corr_threshold`` loses its
       lower-priority member (ties: the lexicographically later name);
    2. in every dummy group with two or more members over the VIF threshold,
       only the highest-VIF member is removed;
    3. otherwise the single highest-VIF column over the threshold is removed.

    Iterations are counted including the final pass that finds nothing to do.
    """
    if vif_threshold <= 1 or corr_threshold <= 0 or corr_threshold > 1:
        raise ValueError("need vif_threshold > 1 and 0 < corr_threshold <= 1")
    rlog = ReductionLog(vif_threshold, corr_threshold)
    current = frame
    groups = dummy_groups(frame.schema)
    group_of = {n: g for g, members in groups.items() for n in members}

    for it in range(1, max_iters + 1):
        rlog.iterations = it
        names = feature_names(current)
        if len(names) < 2:
            rlog.final = VifReport(names, [0.0] * len(names), [1.0] * len(names))
            return current, rlog

        corr = correlation_matrix(current, names)
        absC = np.abs(corr.values)
        iu = np.triu_indices(len(names), k=1)
        hot = np.flatnonzero(absC[iu] >= corr_threshold)
        if hot.size:
            pairs = sorted(
                ((-absC[iu[0][h], iu[1][h]], names[iu[0][h]], names[iu[1][h]]) for h in hot)
            )
            neg_r, a, b = pairs[0]
            victim = min((a, b), key=lambda n: _victim_key(current, n))
            partner = b if victim == a else a
            rlog.actions.append(ReductionAction(victim, "pairwise-correlation", it, -neg_r, partner))
            emit(log, "vif_removed", column=victim, reason="pairwise-correlation", iteration=it,
                 statistic=-neg_r, partner=partner)
            current = current.drop([victim])
            continue

        report = vif_report(current, names, workers=workers)
        over = {n: v for n, v in zip(report.names, report.vif) if v > vif_threshold}
        if not over:
            rlog.final = report
            emit(log, "vif_done", iterations=it, removed=len(rlog.actions))
            return current, rlog

        sibling_sets: dict[str, list[str]] = {}
        for n in over:
            if n in group_of:
                sibling_sets.setdefault(group_of[n], []).append(n)
        sibling_sets = {g: m for g, m in sibling_sets.items() if len(m) >= 2}
        removed = []
        if sibling_sets:
            for g in sorted(sibling_sets):
                members = sibling_sets[g]
                victim = min(members, key=lambda n: (-over[n],) + _victim_key(current, n))
                rlog.actions.append(ReductionAction(victim, "dummy-sibling-max", it, over[victim]))
                emit(log, "vif_removed", column=victim, reason="dummy-sibling-max", iteration=it,
                     statistic=over[victim], group=g)
                removed.append(victim)
        else:
            victim = min(over, key=lambda n: (-over[n],) + _victim_key(current, n))
            rlog.actions.append(ReductionAction(victim, "vif-over-threshold", it, over[victim]))
            emit(log, "vif_removed", column=victim, reason="vif-over-threshold", iteration=it,
                 statistic=over[victim])
            removed.append(victim)
        current = current.drop(removed)

    raise ReductionError(
        f"VIF reduction did not converge within {max_iters} iterations", rlog
    )
