"""Typed tabular data model, CSV ingestion, HSIS-style joins and encoding.

A :class:`Frame` is a column-major table whose columns carry a role
(continuous, categorical, binary, identifier, route_id, milepost,
coordinate, target) and a feature class (``static_road`` or ``dynamic``).
Numeric roles are stored as ``float64`` arrays with NaN for missing cells;
string roles are stored as object arrays with ``None`` for missing cells.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .runlog import RunLog, emit

ROLES = (
    "continuous",
    "categorical",
    "binary",
    "identifier",
    "route_id",
    "milepost",
    "coordinate",
    "target",
)
FEATURE_ROLES = frozenset({"continuous", "categorical", "binary"})
STRING_ROLES = frozenset({"categorical", "identifier", "route_id"})
FEATURE_CLASSES = ("static_road", "dynamic")
MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan", "null"})

SYNTHETIC_COLUMN = "_synthetic"


class SchemaError(ValueError):
    """Schema declaration or schema/data mismatch."""


class IngestError(ValueError):
    """A cell could not be parsed; carries row/column location."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class JoinError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    role: str
    feature_class: str = "dynamic"
    levels: tuple[str, ...] | None = None
    priority: int = 0
    group: str | None = None  # source categorical of a dummy column

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.feature_class not in FEATURE_CLASSES:
            raise SchemaError(
                f"column {self.name!r}: unknown feature class {self.feature_class!r}"
            )
        if self.levels is not None:
            levels = tuple(str(lv) for lv in self.levels)
            if len(set(levels)) != len(levels):
                raise SchemaError(f"column {self.name!r}: duplicate levels")
            object.__setattr__(self, "levels", levels)

    @property
    def is_feature(self) -> bool:
        return self.role in FEATURE_ROLES

    @property
    def is_string(self) -> bool:
        return self.role in STRING_ROLES

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "role": self.role,
            "feature_class": self.feature_class,
        }
        if self.levels is not None:
            out["levels"] = list(self.levels)
        if self.priority:
            out["priority"] = self.priority
        if self.group is not None:
            out["group"] = self.group
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Column:
        unknown = set(d) - {"name", "role", "feature_class", "levels", "priority", "group"}
        if unknown:
            raise SchemaError(f"column {d.get('name')!r}: unknown keys {sorted(unknown)}")
        try:
            name = str(d["name"])
            role = str(d["role"])
        except KeyError as exc:
            raise SchemaError(f"column entry missing {exc.args[0]!r}: {dict(d)}") from None
        levels = d.get("levels")
        return cls(
            name=name,
            role=role,
            feature_class=str(d.get("feature_class", "dynamic")),
            levels=tuple(levels) if levels is not None else None,
            priority=int(d.get("priority", 0)),
            group=d.get("group"),
        )


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names: {dupes}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def __getitem__(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.columns)

    def with_role(self, *roles: str) -> list[Column]:
        return [c for c in self.columns if c.role in roles]

    def features(self) -> list[Column]:
        return [c for c in self.columns if c.is_feature]

    def to_dict(self) -> dict[str, Any]:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Schema:
        if "columns" not in d:
            raise SchemaError("schema config needs a 'columns' list")
        return cls(tuple(Column.from_dict(c) for c in d["columns"]))


def load_schema(path: str | Path, table: str | None = None) -> Schema:
    """Read a schema config (YAML or JSON).

    Two layouts are accepted: a single table (``columns: [...]``) or several
    tables (``tables: {crash: {columns: [...]}, unit: ...}``), in which case
    ``table`` selects one.
    """
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if "tables" in doc:
        if table is None:
            raise SchemaError(f"{path}: multi-table schema, pass a table name")
        if table not in doc["tables"]:
            raise SchemaError(f"{path}: no table {table!r} (have {sorted(doc['tables'])})")
        return Schema.from_dict(doc["tables"][table])
    return Schema.from_dict(doc)


class Frame:
    """Immutable column-major table bound to a :class:`Schema`."""

    def __init__(self, schema: Schema, data: Mapping[str, Any], validate: bool = True):
        missing = [n for n in schema.names if n not in data]
        if missing:
            raise SchemaError(f"no data for columns {missing}")
        cols: dict[str, np.ndarray] = {}
        resolved = []
        for col in schema.columns:
            arr = _as_column_array(col, data[col.name])
            arr.setflags(write=False)
            cols[col.name] = arr
            if col.role == "categorical" and col.levels is None:
                # undeclared levels are the sorted observed values
                col = replace(col, levels=tuple(sorted({v for v in arr if v is not None})))
            resolved.append(col)
        self.schema = schema if resolved == list(schema.columns) else Schema(tuple(resolved))
        lengths = {len(a) for a in cols.values()}
        if len(lengths) > 1:
            raise SchemaError(f"columns have unequal lengths {sorted(lengths)}")
        self._data = cols
        self.n_rows = lengths.pop() if lengths else 0
        if validate:
            self.validate()

    def validate(self) -> None:
        for col in self.schema.columns:
            arr = self._data[col.name]
            if col.role in ("binary", "target"):
                vals = arr[~np.isnan(arr)]
                bad = vals[(vals != 0.0) & (vals != 1.0)]
                if bad.size:
                    raise SchemaError(f"{col.role} column {col.name!r} holds non-0/1 value {bad[0]!r}")
            elif col.role == "milepost":
                vals = arr[~np.isnan(arr)]
                if np.any(~np.isfinite(vals)) or np.any(vals < 0):
                    raise SchemaError(f"milepost column {col.name!r} must be finite and non-negative")
            elif col.role == "categorical" and col.levels is not None:
                allowed = set(col.levels)
                for i, v in enumerate(arr):
                    if v is not None and v not in allowed:
                        raise IngestError(
                            f"column {col.name!r} row {i}: level {v!r} not in {list(col.levels)}",
                            row=i,
                            column=col.name,
                        )

    @property
    def names(self) -> list[str]:
        return self.schema.names

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._data[name]
        except KeyError:
            raise KeyError(f"frame has no column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return self.n_rows

    def __repr__(self) -> str:
        return f"Frame({self.n_rows} rows x {len(self.schema)} cols)"

    def select(self, names: Sequence[str]) -> Frame:
        schema = Schema(tuple(self.schema[n] for n in names))
        return Frame(schema, {n: self._data[n] for n in names}, validate=False)

    def drop(self, names: Iterable[str]) -> Frame:
        gone = set(names)
        return self.select([n for n in self.names if n not in gone])

    def take(self, indices: Sequence[int] | np.ndarray) -> Frame:
        idx = np.asarray(indices, dtype=np.intp)
        return Frame(self.schema, {n: a[idx] for n, a in self._data.items()}, validate=False)

    def with_columns(self, columns: Sequence[Column], values: Mapping[str, Any]) -> Frame:
        """Append (or replace, keeping position) the given columns."""
        by_name = {c.name: c for c in columns}
        new_cols = [by_name.pop(c.name, c) for c in self.schema.columns]
        new_cols.extend(c for c in columns if c.name in by_name)
        data = dict(self._data)
        data.update(values)
        return Frame(Schema(tuple(new_cols)), data)

    def replace_schema(self, schema: Schema) -> Frame:
        return Frame(schema, {n: self._data[n] for n in schema.names})

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Stack numeric columns into an ``(n_rows, len(names))`` float array."""
        if not names:
            return np.empty((self.n_rows, 0))
        for n in names:
            if self.schema[n].is_string:
                raise SchemaError(f"column {n!r} is not numeric")
        return np.column_stack([self._data[n] for n in names]).astype(np.float64, copy=False)

    def row(self, i: int) -> dict[str, Any]:
        return {n: _scalar(a[i]) for n, a in self._data.items()}

    def equals(self, other: Frame) -> bool:
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        for n in self.names:
            a, b = self._data[n], other._data[n]
            if self.schema[n].is_string:
                if list(a) != list(b):
                    return False
            elif not np.array_equal(a, b, equal_nan=True):
                return False
        return True

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.schema.to_dict(), sort_keys=True).encode())
        for n in self.names:
            a = self._data[n]
            if self.schema[n].is_string:
                h.update("\x1f".join("\x00" if v is None else v for v in a).encode())
            else:
                h.update(np.ascontiguousarray(a).tobytes())
            h.update(b"\x1e")
        return h.hexdigest()


def _scalar(v: Any) -> Any:
    return v.item() if isinstance(v, np.generic) else v


def _as_column_array(col: Column, values: Any) -> np.ndarray:
    if col.is_string:
        arr = np.empty(len(values), dtype=object)
        for i, v in enumerate(values):
            arr[i] = None if v is None else str(v)
        return arr
    return np.array(values, dtype=np.float64)


# -- CSV ----------------------------------------------------------------------


def _parse_cell(col: Column, raw: str, row: int) -> Any:
    if raw.strip() in MISSING_TOKENS:
        return None if col.is_string else math.nan
    if col.is_string:
        return raw
    try:
        value = float(raw)
    except ValueError:
        raise IngestError(
            f"row {row}, column {col.name!r}: cannot parse {raw!r} as a number",
            row=row,
            column=col.name,
        ) from None
    if col.role in ("binary", "target") and value not in (0.0, 1.0):
        raise IngestError(
            f"row {row}, column {col.name!r}: {col.role} value must be 0 or 1, got {raw!r}",
            row=row,
            column=col.name,
        )
    return value


def load_csv(path: str | Path, schema: Schema) -> Frame:
    """Read an RFC-4180 CSV file into a :class:`Frame`.

    Columns are matched to the schema by name, in any order. Row numbers in
    errors are 1-based data rows (the header is row 0). Categorical levels not
    declared in the schema are collected from the data in sorted order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        header = [h.strip() for h in header]
        extra = [h for h in header if h not in schema]
        if extra:
            raise SchemaError(f"{path}: column {extra[0]!r} is not declared in the schema")
        absent = [n for n in schema.names if n not in header]
        if absent:
            raise SchemaError(f"{path}: schema column {absent[0]!r} missing from file")
        pos = {h: i for i, h in enumerate(header)}
        cols = {n: [] for n in schema.names}
        for r, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise IngestError(
                    f"{path}: row {r} has {len(record)} cells, expected {len(header)}", row=r
                )
            for col in schema.columns:
                cols[col.name].append(_parse_cell(col, record[pos[col.name]], r))
    return Frame(schema, cols)


def _format_cell(col: Column, v: Any) -> str:
    if col.is_string:
        return "" if v is None else v
    if math.isnan(v):
        return ""
    if col.role in ("binary", "target"):
        return str(int(v))
    return repr(float(v))


def write_csv(frame: Frame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(frame.names)
        arrays = [(c, frame[c.name]) for c in frame.schema.columns]
        for i in range(frame.n_rows):
            w.writerow([_format_cell(c, a[i]) for c, a in arrays])


def schema_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".schema.json")


def save_frame(frame: Frame, path: str | Path) -> None:
    """Write ``path`` (CSV) plus ``path.schema.json`` so roles and groups survive."""
    write_csv(frame, path)
    schema_path_for(path).write_text(
        json.dumps(frame.schema.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_frame(path: str | Path) -> Frame:
    schema = Schema.from_dict(json.loads(schema_path_for(path).read_text(encoding="utf-8")))
    return load_csv(path, schema)


# -- joins --------------------------------------------------------------------


def _key_tuples(frame: Frame, keys: Sequence[str]) -> list[tuple]:
    for k in keys:
        if k not in frame:
            raise SchemaError(f"key column {k!r} missing from frame")
    arrays = [frame[k] for k in keys]
    return [tuple(_scalar(a[i]) for a in arrays) for i in range(frame.n_rows)]


def join_records(
    crash: Frame,
    unit: Frame,
    person: Frame,
    keys: Sequence[str],
    log: RunLog | None = None,
) -> Frame:
    """Attach the first matching unit and person row to each crash.

    Crash ids must be unique. Crashes without a unit (or person) match are
    dropped; drops and multi-row tie-breaks are reported to ``log``.
    """
    keys = list(keys)
    crash_keys = _key_tuples(crash, keys)
    seen: dict[tuple, int] = {}
    for i, k in enumerate(crash_keys):
        if k in seen:
            raise JoinError(f"duplicate crash identifier {k} at rows {seen[k]} and {i}")
        seen[k] = i

    out_cols = list(crash.schema.columns)
    out_data: dict[str, np.ndarray] = {}
    keep = np.ones(crash.n_rows, dtype=bool)
    matched: list[tuple[Frame, np.ndarray, list[Column]]] = []
    for table, other in (("unit", unit), ("person", person)):
        first: dict[tuple, int] = {}
        multi = 0
        for j, k in enumerate(_key_tuples(other, keys)):
            if k in first:
                multi += 1
            else:
                first[k] = j
        if multi:
            emit(log, "join_first_row_used", table=table, extra_rows=multi)
        idx = np.array([first.get(k, -1) for k in crash_keys], dtype=np.intp)
        no_match = idx < 0
        n_drop = int(np.sum(no_match & keep))
        keep &= ~no_match
        emit(log, "join_dropped", table=table, reason="no_match", count=n_drop)
        extra = []
        taken = {c.name for c in out_cols}
        for c in other.schema.columns:
            if c.name in keys:
                continue
            name = c.name if c.name not in taken else f"{table}_{c.name}"
            if name in taken:
                raise SchemaError(f"cannot place {table} column {c.name!r}: name clash")
            taken.add(name)
            extra.append((c, replace(c, name=name)))
        matched.append((other, idx, extra))
        out_cols.extend(new for _, new in extra)

    rows = np.flatnonzero(keep)
    for c in crash.schema.columns:
        out_data[c.name] = crash[c.name][rows]
    for other, idx, extra in matched:
        sel = idx[rows]
        for orig, new in extra:
            out_data[new.name] = other[orig.name][sel]
    emit(log, "join_summary", crash_rows=crash.n_rows, output_rows=int(rows.size),
         dropped=int(crash.n_rows - rows.size))
    return Frame(Schema(tuple(out_cols)), out_data)


@dataclass(frozen=True)
class SegmentRecord:
    route_id: str
    begin_mp: float
    end_mp: float
    features: Mapping[str, Any] = field(default_factory=dict)
    lat: float | None = None
    lon: float | None = None

    def __post_init__(self):
        if not self.begin_mp < self.end_mp:
            raise SchemaError(
                f"segment {self.route_id}: begin milepost {self.begin_mp} must be < end {self.end_mp}"
            )

    @property
    def has_coordinates(self) -> bool:
        return self.lat is not None and self.lon is not None


SEGMENT_BEGIN = "begin_mp"
SEGMENT_END = "end_mp"


def segments_from_frame(frame: Frame) -> tuple[list[SegmentRecord], list[Column]]:
    """Turn a road-inventory frame into segment records plus their feature columns.

    The frame needs one ``route_id`` column and milepost columns named
    ``begin_mp``/``end_mp``; ``lat``/``lon`` coordinate columns are optional.
    """
    routes = frame.schema.with_role("route_id")
    if len(routes) != 1:
        raise SchemaError("segment inventory needs exactly one route_id column")
    for n in (SEGMENT_BEGIN, SEGMENT_END):
        if n not in frame:
            raise SchemaError(f"segment inventory needs a {n!r} milepost column")
    feat_cols = frame.schema.features()
    has_coords = "lat" in frame and "lon" in frame
    route = frame[routes[0].name]
    begin, end = frame[SEGMENT_BEGIN], frame[SEGMENT_END]
    records = []
    for i in range(frame.n_rows):
        lat = lon = None
        if has_coords and not (np.isnan(frame["lat"][i]) or np.isnan(frame["lon"][i])):
            lat, lon = float(frame["lat"][i]), float(frame["lon"][i])
        records.append(
            SegmentRecord(
                route_id=route[i],
                begin_mp=float(begin[i]),
                end_mp=float(end[i]),
                features={c.name: _scalar(frame[c.name][i]) for c in feat_cols},
                lat=lat,
                lon=lon,
            )
        )
    return records, feat_cols


def check_overlaps(segments: Sequence[SegmentRecord]) -> None:
    by_route: dict[str, list[SegmentRecord]] = {}
    for s in segments:
        by_route.setdefault(s.route_id, []).append(s)
    conflicts = []
    for route, segs in by_route.items():
        segs = sorted(segs, key=lambda s: (s.begin_mp, s.end_mp))
        for a, b in zip(segs, segs[1:]):
            if b.begin_mp < a.end_mp:
                conflicts.append(
                    f"{route}:[{a.begin_mp},{a.end_mp}) overlaps {route}:[{b.begin_mp},{b.end_mp})"
                )
    if conflicts:
        raise JoinError("overlapping segments: " + "; ".join(conflicts))


def map_to_segments(
    crashes: Frame,
    segments: Sequence[SegmentRecord],
    columns: Sequence[Column],
    log: RunLog | None = None,
) -> Frame:
    """Match each crash to the segment on its route with ``begin <= mp < end``.

    The static features named by ``columns`` are appended. Unmatched crashes
    are dropped and counted.
    """
    routes = crashes.schema.with_role("route_id")
    mps = crashes.schema.with_role("milepost")
    if len(routes) != 1 or len(mps) != 1:
        raise SchemaError("crash frame needs exactly one route_id and one milepost column")
    check_overlaps(segments)
    clash = [c.name for c in columns if c.name in crashes]
    if clash:
        raise SchemaError(f"segment feature names already present in crash frame: {clash}")

    index: dict[str, tuple[np.ndarray, np.ndarray, list[int]]] = {}
    grouped: dict[str, list[int]] = {}
    for j, s in enumerate(segments):
        grouped.setdefault(s.route_id, []).append(j)
    for route, js in grouped.items():
        js = sorted(js, key=lambda j: segments[j].begin_mp)
        index[route] = (
            np.array([segments[j].begin_mp for j in js]),
            np.array([segments[j].end_mp for j in js]),
            js,
        )

    route = crashes[routes[0].name]
    mp = crashes[mps[0].name]
    hit = np.full(crashes.n_rows, -1, dtype=np.intp)
    for i in range(crashes.n_rows):
        entry = index.get(route[i])
        if entry is None or np.isnan(mp[i]):
            continue
        begins, ends, js = entry
        k = int(np.searchsorted(begins, mp[i], side="right")) - 1
        if k >= 0 and mp[i] < ends[k]:
            hit[i] = js[k]

    rows = np.flatnonzero(hit >= 0)
    emit(log, "segment_unmatched", count=int(crashes.n_rows - rows.size))
    data = {n: crashes[n][rows] for n in crashes.names}
    for c in columns:
        data[c.name] = [segments[j].features.get(c.name) for j in hit[rows]]
        if not c.is_string:
            data[c.name] = [math.nan if v is None else v for v in data[c.name]]
    return Frame(Schema(tuple(crashes.schema.columns) + tuple(columns)), data)


# -- encoding and missing values ---------------------------------------------


def dummy_name(column: str, level: str) -> str:
    return f"{column}={level}"


def encode_dummies(frame: Frame) -> Frame:
    """Full one-hot expansion of every categorical column.

    A column with k levels becomes k binary columns ``<col>=<level>`` in its
    original position; each carries ``group=<col>``. Missing categorical cells
    become NaN in every dummy of the group.
    """
    cols: list[Column] = []
    data: dict[str, Any] = {}
    for c in frame.schema.columns:
        if c.role != "categorical":
            cols.append(c)
            data[c.name] = frame[c.name]
            continue
        values = frame[c.name]
        missing = np.array([v is None for v in values], dtype=bool)
        for level in c.levels or ():
            name = dummy_name(c.name, level)
            col = Column(name, "binary", c.feature_class, priority=c.priority, group=c.name)
            arr = np.array([v == level for v in values], dtype=np.float64)
            arr[missing] = np.nan
            cols.append(col)
            data[name] = arr
    return Frame(Schema(tuple(cols)), data)


def dummy_groups(schema: Schema) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for c in schema.columns:
        if c.group is not None:
            groups.setdefault(c.group, []).append(c.name)
    return groups


def _mode_str(values: np.ndarray) -> str:
    counts: dict[str, int] = {}
    for v in values:
        if v is not None:
            counts[v] = counts.get(v, 0) + 1
    best = max(counts.values())
    return min(k for k, n in counts.items() if n == best)


def resolve_missing(frame: Frame, policy: str = "impute", log: RunLog | None = None) -> Frame:
    """Drop or impute missing cells.

    ``impute`` fills continuous-like columns with the median and binary or
    string columns with the mode (ties: lower value / lexicographically first
    level). Rows with a missing target are always dropped since labels cannot
    be imputed. Dummy groups are imputed jointly so each row stays one-hot.
    """
    if policy not in ("impute", "drop_row"):
        raise ValueError(f"unknown missing-value policy {policy!r}")
    missing = {}
    for c in frame.schema.columns:
        a = frame[c.name]
        missing[c.name] = (
            np.array([v is None for v in a], dtype=bool) if c.is_string else np.isnan(a)
        )

    if policy == "drop_row":
        bad = np.zeros(frame.n_rows, dtype=bool)
        for m in missing.values():
            bad |= m
        emit(log, "missing_drop_row", count=int(bad.sum()))
        return frame.take(np.flatnonzero(~bad))

    targets = [c.name for c in frame.schema.with_role("target")]
    bad_target = np.zeros(frame.n_rows, dtype=bool)
    for t in targets:
        bad_target |= missing[t]
    if bad_target.any():
        emit(log, "missing_target_drop", count=int(bad_target.sum()))
        frame = frame.take(np.flatnonzero(~bad_target))
        missing = {n: m[~bad_target] for n, m in missing.items()}

    data = {n: frame[n] for n in frame.names}
    groups = dummy_groups(frame.schema)
    grouped = {n for members in groups.values() for n in members}
    for c in frame.schema.columns:
        m = missing[c.name]
        if c.name in grouped or c.role == "identifier" or not m.any():
            continue
        if m.all():
            raise ValueError(f"column {c.name!r} is entirely missing; cannot impute")
        a = frame[c.name].copy()
        if c.is_string:
            fill: Any = _mode_str(a[~m])
        elif c.role == "binary":
            ones = float(np.sum(a[~m]))
            fill = 1.0 if ones > (np.sum(~m) - ones) else 0.0
        else:
            fill = float(np.median(a[~m]))
        a[m] = fill
        data[c.name] = a
        emit(log, "missing_imputed", column=c.name, count=int(m.sum()), value=fill)
    for group, members in groups.items():
        m = missing[members[0]]
        if not m.any():
            continue
        if m.all():
            raise ValueError(f"dummy group {group!r} is entirely missing; cannot impute")
        block = frame.matrix(members)
        totals = block[~m].sum(axis=0)
        choices = sorted(range(len(members)), key=lambda j: (-totals[j], members[j]))
        winner = choices[0]
        for j, n in enumerate(members):
            a = data[n].copy()
            a[m] = 1.0 if j == winner else 0.0
            data[n] = a
        emit(log, "missing_imputed", column=group, count=int(m.sum()), value=members[winner])
    return Frame(frame.schema, data)
