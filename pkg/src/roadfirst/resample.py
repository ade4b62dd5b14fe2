"""Class rebalancing (random undersampling + SMOTE-NC) and the stratified split."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .dataset import SYNTHETIC_COLUMN, Column, Frame, SchemaError, dummy_groups
from .runlog import RunLog, emit


class ResampleError(ValueError):
    pass


@dataclass(frozen=True)
class BalanceConfig:
    """Knobs for :func:`rumc` and :func:`smote_nc`.

    ``undersample_ratio=None`` keeps ``min(1, 2 * minority / majority)`` of the
    majority class, i.e. undersampling stops at twice the minority count and
    SMOTE-NC closes the rest of the gap.
    """

    undersample_ratio: float | None = None
    target_ratio: float = 1.0
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.undersample_ratio is not None and not 0 < self.undersample_ratio <= 1:
            raise ValueError("undersample_ratio must be in (0, 1]")
        if not 0 < self.target_ratio <= 1:
            raise ValueError("target_ratio must be in (0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _class_split(frame: Frame, target: str) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Return (majority rows, minority rows, majority label, minority label)."""
    if frame.schema[target].role != "target":
        raise SchemaError(f"{target!r} is not a target column")
    y = frame[target]
    ones = np.flatnonzero(y == 1.0)
    zeros = np.flatnonzero(y == 0.0)
    if ones.size == 0 or zeros.size == 0:
        raise ResampleError(f"target {target!r} has a single class")
    if ones.size > zeros.size:
        return ones, zeros, 1.0, 0.0
    return zeros, ones, 0.0, 1.0


def is_synthetic(frame: Frame) -> np.ndarray:
    if SYNTHETIC_COLUMN not in frame:
        return np.zeros(frame.n_rows, dtype=bool)
    return np.array([v == "1" for v in frame[SYNTHETIC_COLUMN]], dtype=bool)


def assert_no_synthetic(frame: Frame) -> None:
    n = int(is_synthetic(frame).sum())
    if n:
        raise ResampleError(f"partition holds {n} synthetic rows")


def class_counts(frame: Frame, target: str) -> dict[str, int]:
    y = frame[target]
    return {"0": int(np.sum(y == 0.0)), "1": int(np.sum(y == 1.0))}


def rumc(frame: Frame, target: str, config: BalanceConfig, log: RunLog | None = None) -> Frame:
    """Randomly undersample the majority class without replacement.

    Keeps ``ceil(r_u * majority)`` majority rows and all minority rows, in
    their original order.
    """
    major, minor, _, _ = _class_split(frame, target)
    ratio = config.undersample_ratio
    if ratio is None:
        ratio = min(1.0, 2.0 * minor.size / major.size)
    n_keep = math.ceil(ratio * major.size)
    rng = np.random.default_rng([config.seed, 0x52554D43])
    kept = rng.choice(major, size=n_keep, replace=False)
    rows = np.sort(np.concatenate([kept, minor]))
    out = frame.take(rows)
    emit(log, "balance_rumc", target=target, before=class_counts(frame, target),
         after=class_counts(out, target), undersample_ratio=ratio)
    return out


@dataclass
class MixedDistanceContext:
    """Continuous columns, categorical features and the SMOTE-NC penalty ``med``.

    A categorical feature is a tuple of column names: a dummy group (one-hot
    columns), or a single binary or string-valued categorical column.
    """

    continuous: list[str]
    categorical: list[tuple[str, ...]]
    med: float

    def __post_init__(self):
        if not self.med >= 0:
            raise ValueError("med must be non-negative")


def mixed_context(frame: Frame, target: str, minority_rows: np.ndarray | None = None) -> MixedDistanceContext:
    """Build the distance context from a frame; ``med`` uses minority rows only."""
    if minority_rows is None:
        _, minority_rows, _, _ = _class_split(frame, target)
    groups = dummy_groups(frame.schema)
    in_group = {n for m in groups.values() for n in m}
    cont, cats = [], []
    seen_groups = set()
    for c in frame.schema.features():
        if c.role == "continuous":
            cont.append(c.name)
        elif c.name in in_group:
            if c.group not in seen_groups:
                seen_groups.add(c.group)
                cats.append(tuple(groups[c.group]))
        else:
            cats.append((c.name,))
    if cont and minority_rows.size:
        stds = frame.matrix(cont)[minority_rows].std(axis=0)
        med = float(np.median(stds))
    else:
        med = 0.0
    return MixedDistanceContext(cont, cats, med)


def _code(row: Mapping[str, Any], feature: tuple[str, ...]) -> Any:
    if len(feature) == 1:
        return row[feature[0]]
    vals = [row[n] for n in feature]
    return int(np.argmax(vals)) if max(vals) > 0 else -1


def mixed_distance(a: Mapping[str, Any], b: Mapping[str, Any], ctx: MixedDistanceContext) -> float:
    """Euclidean distance on continuous columns plus ``med**2`` per differing categorical feature."""
    sq = 0.0
    for n in ctx.continuous:
        d = float(a[n]) - float(b[n])
        sq += d * d
    for feature in ctx.categorical:
        if _code(a, feature) != _code(b, feature):
            sq += ctx.med * ctx.med
    return math.sqrt(sq)


def _encode_codes(frame: Frame, rows: np.ndarray, ctx: MixedDistanceContext) -> tuple[np.ndarray, list]:
    """Integer code matrix (rows x categorical features) and per-feature decoders."""
    codes = np.empty((rows.size, len(ctx.categorical)), dtype=np.int64)
    decoders: list = []
    for j, feature in enumerate(ctx.categorical):
        if len(feature) > 1:
            block = frame.matrix(list(feature))[rows]
            c = np.argmax(block, axis=1)
            c[block.max(axis=1) <= 0] = -1
            codes[:, j] = c
            decoders.append(("group", feature))
        elif frame.schema[feature[0]].is_string:
            vals = frame[feature[0]][rows]
            levels = sorted({v for v in vals if v is not None})
            lookup = {lv: i for i, lv in enumerate(levels)}
            codes[:, j] = [lookup.get(v, -1) for v in vals]
            decoders.append(("string", feature[0], levels))
        else:
            codes[:, j] = frame[feature[0]][rows].astype(np.int64)
            decoders.append(("binary", feature[0]))
    return codes, decoders


def _neighbors(cont: np.ndarray, codes: np.ndarray, med: float, seeds: np.ndarray, k: int) -> np.ndarray:
    """k nearest minority neighbours (excluding self) for each seed; ties by index."""
    out = np.empty((seeds.size, k), dtype=np.intp)
    penalty = med * med
    chunk = max(1, 2_000_000 // max(1, cont.shape[0] * max(1, cont.shape[1] + codes.shape[1])))
    for start in range(0, seeds.size, chunk):
        s = seeds[start:start + chunk]
        d2 = np.zeros((s.size, cont.shape[0]))
        if cont.shape[1]:
            diff = cont[s][:, None, :] - cont[None, :, :]
            d2 += np.einsum("ijk,ijk->ij", diff, diff)
        if codes.shape[1]:
            d2 += penalty * (codes[s][:, None, :] != codes[None, :, :]).sum(axis=2)
        d2[np.arange(s.size), s] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:start + s.size] = order[:, :k]
    return out


@dataclass(frozen=True)
class SmotePlan:
    """Where each synthetic row comes from, as row indices of the input frame.

    ``neighborhoods[i]`` are the ``k`` nearest minority rows of ``seeds[i]``
    (nearest first) and ``neighbors[i]`` the one interpolated towards with
    gap ``gaps[i]``.
    """

    seeds: np.ndarray
    neighbors: np.ndarray
    neighborhoods: np.ndarray
    gaps: np.ndarray
    context: MixedDistanceContext | None

    @property
    def size(self) -> int:
        return int(self.seeds.size)


def smote_plan(frame: Frame, target: str, config: BalanceConfig) -> SmotePlan:
    """Draw seeds, neighbours and gaps for the synthetic rows :func:`smote_nc` would add.

    Each synthetic row ``i`` draws from its own generator keyed by
    ``(seed, i)``, so the plan does not depend on how rows are processed.
    """
    major, minor, _, _ = _class_split(frame, target)
    k = config.k
    if minor.size <= k:
        raise ResampleError(
            f"minority class has {minor.size} rows; SMOTE-NC needs more than k={k}, use a smaller k"
        )
    n_synth = max(0, math.ceil(config.target_ratio * major.size) - minor.size)
    if n_synth == 0:
        empty = np.empty(0, dtype=np.intp)
        return SmotePlan(empty, empty, np.empty((0, k), dtype=np.intp), np.empty(0), None)
    ctx = mixed_context(frame, target, minor)
    cont = frame.matrix(ctx.continuous)[minor] if ctx.continuous else np.empty((minor.size, 0))
    codes, _ = _encode_codes(frame, minor, ctx)

    draws = np.empty((n_synth, 3))
    for i in range(n_synth):
        rng = np.random.default_rng([config.seed, 0x534D4F54, i])
        draws[i] = (rng.integers(minor.size), rng.integers(k), rng.random())
    seed_pos = draws[:, 0].astype(np.intp)
    pick = draws[:, 1].astype(np.intp)

    uniq, inverse = np.unique(seed_pos, return_inverse=True)
    nn = _neighbors(cont, codes, ctx.med, uniq, k)[inverse]
    chosen = nn[np.arange(n_synth), pick]
    return SmotePlan(minor[seed_pos], minor[chosen], minor[nn], draws[:, 2], ctx)


def smote_nc(frame: Frame, target: str, config: BalanceConfig, log: RunLog | None = None) -> Frame:
    """Append SMOTE-NC synthetic minority rows until minority >= ceil(ratio * majority).

    Rows follow :func:`smote_plan`. Continuous columns interpolate
    ``seed + u * (neighbour - seed)``; categorical features take the most
    common value among the ``k`` neighbours, ties going to the seed's own
    value, then to the lowest code. Other columns copy the seed row;
    identifiers become ``synthetic-<i>``.
    """
    plan = smote_plan(frame, target, config)
    if SYNTHETIC_COLUMN not in frame:
        frame = frame.with_columns(
            [Column(SYNTHETIC_COLUMN, "identifier")], {SYNTHETIC_COLUMN: ["0"] * frame.n_rows}
        )
    if plan.size == 0:
        emit(log, "balance_smote_nc", target=target, synthetic=0, after=class_counts(frame, target))
        return frame

    n_synth, k, ctx = plan.size, config.k, plan.context
    _, minor, _, minor_label = _class_split(frame, target)
    # positions within the minority block
    pos = np.empty(frame.n_rows, dtype=np.intp)
    pos[minor] = np.arange(minor.size)
    seed_pos, chosen, nn = pos[plan.seeds], pos[plan.neighbors], pos[plan.neighborhoods]
    cont = frame.matrix(ctx.continuous)[minor] if ctx.continuous else np.empty((minor.size, 0))
    codes, decoders = _encode_codes(frame, minor, ctx)

    new_cont = cont[seed_pos] + plan.gaps[:, None] * (cont[chosen] - cont[seed_pos])
    new_codes = np.empty((n_synth, codes.shape[1]), dtype=np.int64)
    rows = np.arange(n_synth)
    for j in range(codes.shape[1]):
        # shift by one so the "no level" code -1 gets a slot
        nb_codes = codes[nn, j] + 1
        own = codes[seed_pos, j] + 1
        tally = np.zeros((n_synth, int(codes[:, j].max()) + 2), dtype=np.int64)
        for t in range(k):
            np.add.at(tally, (rows, nb_codes[:, t]), 1)
        best = tally.max(axis=1)
        pick_own = tally[rows, own] == best
        new_codes[:, j] = np.where(pick_own, own, np.argmax(tally, axis=1)) - 1

    src = plan.seeds
    data: dict[str, Any] = {}
    for c in frame.schema.columns:
        data[c.name] = list(frame[c.name][src]) if c.is_string else frame[c.name][src].copy()
    for j, n in enumerate(ctx.continuous):
        data[n] = new_cont[:, j]
    for j, dec in enumerate(decoders):
        col = new_codes[:, j]
        if dec[0] == "group":
            for pos, n in enumerate(dec[1]):
                data[n] = (col == pos).astype(np.float64)
        elif dec[0] == "string":
            data[dec[1]] = [dec[2][v] if v >= 0 else None for v in col]
        else:
            data[dec[1]] = col.astype(np.float64)
    data[target] = np.full(n_synth, minor_label)
    for c in frame.schema.with_role("identifier"):
        data[c.name] = [f"synthetic-{i}" for i in range(n_synth)]
    data[SYNTHETIC_COLUMN] = ["1"] * n_synth

    combined = {
        n: np.concatenate([np.asarray(frame[n], dtype=object if frame.schema[n].is_string else None),
                           np.asarray(data[n], dtype=object if frame.schema[n].is_string else None)])
        for n in frame.names
    }
    out = Frame(frame.schema, combined)
    emit(log, "balance_smote_nc", target=target, synthetic=n_synth, k=k, med=ctx.med,
         after=class_counts(out, target))
    return out


def balance(frame: Frame, target: str, config: BalanceConfig, log: RunLog | None = None) -> Frame:
    """RUMC first, then SMOTE-NC up to the configured ratio."""
    emit(log, "balance_start", target=target, before=class_counts(frame, target))
    return smote_nc(rumc(frame, target, config, log), target, config, log)


def train_test_split(
    frame: Frame, target: str, train_fraction: float = 0.8, seed: int = 0
) -> tuple[Frame, Frame]:
    """Stratified split: ``ceil(train_fraction * n_class)`` rows of each class go to train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    y = frame[target]
    rng = np.random.default_rng([seed, 0x53504C54])
    train_idx = []
    for label in (0.0, 1.0):
        rows = np.flatnonzero(y == label)
        if rows.size < 2:
            raise ResampleError(f"class {int(label)} of {target!r} has {rows.size} rows; need >= 2")
        perm = rng.permutation(rows)
        train_idx.append(perm[: math.ceil(train_fraction * rows.size)])
    train_rows = np.sort(np.concatenate(train_idx))
    mask = np.ones(frame.n_rows, dtype=bool)
    mask[train_rows] = False
    return frame.take(train_rows), frame.take(np.flatnonzero(mask))


__all__ = [
    "BalanceConfig",
    "MixedDistanceContext",
    "ResampleError",
    "SmotePlan",
    "assert_no_synthetic",
    "balance",
    "class_counts",
    "is_synthetic",
    "mixed_context",
    "mixed_distance",
    "rumc",
    "smote_nc",
    "smote_plan",
    "train_test_split",
]
