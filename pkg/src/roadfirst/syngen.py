"""Synthetic crash, unit, person and road-inventory tables with planted effects.

Labels for each contributing factor come from a logistic model: the log-odds
start at ``logit(base_rate)`` and add ``log(multiplier)`` for every planted
effect that is active on the crash. With no effects the expected positive
rate is exactly the base rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .dataset import (
    Column,
    Frame,
    Schema,
    SegmentRecord,
    dummy_name,
    write_csv,
)

TABLES = ("crash", "unit", "person", "segment")


class GenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    """One source variable of the generated schema.

    Continuous variables draw uniformly from ``values`` when given, else from
    ``[low, high)`` rounded to ``decimals``. Categorical variables draw from
    ``levels`` with ``probs``; binary variables are 1 with probability ``p``.
    """

    name: str
    table: str
    kind: str  # continuous | categorical | binary
    feature_class: str = "dynamic"
    low: float = 0.0
    high: float = 1.0
    decimals: int = 2
    values: tuple[float, ...] | None = None
    levels: tuple[str, ...] | None = None
    probs: tuple[float, ...] | None = None
    p: float = 0.5

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "continuous":
            if self.values is not None:
                return rng.choice(np.asarray(self.values, dtype=np.float64), size=n)
            return np.round(rng.uniform(self.low, self.high, size=n), self.decimals)
        if self.kind == "binary":
            return (rng.random(n) < self.p).astype(np.float64)
        probs = np.asarray(self.probs if self.probs is not None else [1.0] * len(self.levels))
        idx = rng.choice(len(self.levels), size=n, p=probs / probs.sum())
        return np.array(self.levels, dtype=object)[idx]

    def column(self) -> Column:
        return Column(self.name, self.kind, self.feature_class,
                      levels=self.levels if self.kind == "categorical" else None)


@dataclass(frozen=True)
class PlantedEffect:
    feature: str
    factor: str
    multiplier: float
    kind: str = "level"  # window | level
    low: float | None = None
    high: float | None = None
    level: str | None = None

    def __post_init__(self):
        if not self.multiplier > 0:
            raise GenConfigError(f"effect on {self.feature!r}: odds multiplier must be > 0")
        if self.kind not in ("window", "level"):
            raise GenConfigError(f"effect on {self.feature!r}: unknown kind {self.kind!r}")

    def active(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "window":
            v = values.astype(np.float64)
            if self.low <= self.high:
                return (v >= self.low) & (v < self.high)
            return (v >= self.low) | (v < self.high)  # wraps past the top of the range
        return np.array([str(x) == self.level if not isinstance(x, float) else
                         str(int(x)) == self.level for x in values])

    def model_feature(self, var: Variable) -> str:
        if self.kind == "level" and var.kind == "categorical":
            return dummy_name(self.feature, self.level)
        return self.feature


def default_variables() -> list[Variable]:
    return [
        Variable("speed_limit", "segment", "continuous", "static_road", values=(25, 35, 45, 55, 65)),
        Variable("lanes", "segment", "continuous", "static_road", values=(1, 2, 3, 4)),
        Variable("aadt_per_lane", "segment", "continuous", "static_road", low=300, high=12000, decimals=0),
        Variable("shoulder_width", "segment", "continuous", "static_road", low=0, high=12, decimals=1),
        Variable("surface", "segment", "categorical", "static_road",
                 levels=("asphalt", "coarse_asphalt", "concrete", "gravel"), probs=(0.5, 0.2, 0.2, 0.1)),
        Variable("median_type", "segment", "categorical", "static_road",
                 levels=("barrier", "grass", "none"), probs=(0.2, 0.3, 0.5)),
        Variable("rural", "segment", "binary", "static_road", p=0.4),
        Variable("curve", "segment", "binary", "static_road", p=0.25),
        Variable("hour", "crash", "continuous", low=0, high=24, decimals=2),
        Variable("weekday", "crash", "categorical",
                 levels=("Fri", "Mon", "Sat", "Sun", "Thu", "Tue", "Wed")),
        Variable("weather", "crash", "categorical",
                 levels=("clear", "fog", "rain", "snow"), probs=(0.65, 0.05, 0.22, 0.08)),
        Variable("road_condition", "crash", "categorical",
                 levels=("dry", "ice", "wet"), probs=(0.7, 0.07, 0.23)),
        Variable("light", "crash", "categorical",
                 levels=("dark_lit", "dark_unlit", "daylight", "dusk"), probs=(0.15, 0.25, 0.5, 0.1)),
        Variable("vehicle_type", "unit", "categorical",
                 levels=("car", "motorcycle", "suv", "truck"), probs=(0.5, 0.05, 0.3, 0.15)),
        Variable("driver_age", "person", "continuous", low=16, high=90, decimals=0),
    ]


def default_effects() -> list[PlantedEffect]:
    return [
        PlantedEffect("hour", "alcohol", 6.0, kind="window", low=23.0, high=4.0),
        PlantedEffect("rural", "alcohol", 5.0, level="1"),
        PlantedEffect("light", "alcohol", 4.0, level="dark_unlit"),
        PlantedEffect("speed_limit", "distracted", 3.0, kind="window", low=40.0, high=50.0),
        PlantedEffect("weather", "distracted", 2.0, level="rain"),
        PlantedEffect("aadt_per_lane", "speeding", 4.0, kind="window", low=6000.0, high=12000.0),
        PlantedEffect("curve", "speeding", 3.0, level="1"),
    ]


@dataclass
class GenConfig:
    n_crashes: int = 10_000
    n_segments: int = 600
    n_routes: int = 30
    base_rates: dict[str, float] = field(
        default_factory=lambda: {"alcohol": 0.05, "distracted": 0.10, "speeding": 0.07}
    )
    effects: list[PlantedEffect] = field(default_factory=default_effects)
    variables: list[Variable] = field(default_factory=default_variables)
    multi_unit_rate: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_crashes < 100:
            raise GenConfigError("n_crashes must be >= 100")
        if self.n_segments < 1 or self.n_routes < 1 or self.n_routes > self.n_segments:
            raise GenConfigError("need 1 <= n_routes <= n_segments")
        for factor, rate in self.base_rates.items():
            if not 0 < rate < 1:
                raise GenConfigError(f"base rate of {factor!r} must be in (0, 1)")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise GenConfigError("duplicate variable names")
        by_name = {v.name: v for v in self.variables}
        for e in self.effects:
            var = by_name.get(e.feature)
            if var is None:
                raise GenConfigError(f"effect references unknown feature {e.feature!r}")
            if e.factor not in self.base_rates:
                raise GenConfigError(f"effect references unknown factor {e.factor!r}")
            if e.kind == "window" and (var.kind != "continuous" or e.low is None or e.high is None):
                raise GenConfigError(f"window effect on {e.feature!r} needs a continuous feature and low/high")
            if e.kind == "level":
                allowed = var.levels if var.kind == "categorical" else ("0", "1") if var.kind == "binary" else ()
                if e.level not in allowed:
                    raise GenConfigError(f"effect level {e.level!r} is not a level of {e.feature!r}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GenConfig:
        d = dict(d)
        if "effects" in d:
            d["effects"] = [PlantedEffect(**e) for e in d["effects"]]
        if "variables" in d:
            d["variables"] = [
                Variable(**{k: tuple(v) if isinstance(v, list) else v for k, v in var.items()})
                for var in d["variables"]
            ]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise GenConfigError(f"unknown generator config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthData:
    crash: Frame
    unit: Frame
    person: Frame
    segments: list[SegmentRecord]
    segment_frame: Frame
    truth: dict[str, Any]
    schema_doc: dict[str, Any]


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def generate(config: GenConfig) -> SynthData:
    """Draw one synthetic dataset; every table is a pure function of ``config``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    by_table = {t: [v for v in config.variables if v.table == t] for t in TABLES}

    # segments: each route is a contiguous run of segments from milepost 0
    route_of = np.sort(np.concatenate([
        np.arange(config.n_routes),
        rng.integers(0, config.n_routes, size=config.n_segments - config.n_routes),
    ]))
    lengths = np.round(rng.uniform(0.2, 2.0, size=config.n_segments), 3)
    seg_data: dict[str, Any] = {v.name: v.sample(rng, config.n_segments) for v in by_table["segment"]}
    origin = np.column_stack([rng.uniform(34.0, 36.5, config.n_routes), rng.uniform(-83.5, -76.5, config.n_routes)])
    heading = rng.uniform(0, 2 * math.pi, config.n_routes)
    route_ids, begins, ends, lats, lons = [], [], [], [], []
    pos: dict[int, float] = {}
    for j in range(config.n_segments):
        r = int(route_of[j])
        b = pos.get(r, 0.0)
        e = round(b + float(lengths[j]), 3)
        pos[r] = e
        route_ids.append(f"R{r:03d}")
        begins.append(b)
        ends.append(e)
        mid = (b + e) / 2 / 69.0  # roughly degrees per mile
        lats.append(round(float(np.clip(origin[r, 0] + mid * math.sin(heading[r]), -90, 90)), 6))
        lons.append(round(float(np.clip(origin[r, 1] + mid * math.cos(heading[r]), -180, 180)), 6))

    seg_cols = [Column("route_id", "route_id", "static_road"),
                Column("begin_mp", "milepost", "static_road"),
                Column("end_mp", "milepost", "static_road")]
    seg_cols += [v.column() for v in by_table["segment"]]
    seg_cols += [Column("lat", "coordinate", "static_road"), Column("lon", "coordinate", "static_road")]
    seg_frame = Frame(Schema(tuple(seg_cols)), {
        "route_id": route_ids, "begin_mp": begins, "end_mp": ends, **seg_data, "lat": lats, "lon": lons,
    })
    segments = [
        SegmentRecord(route_ids[j], begins[j], ends[j],
                      {v.name: _py(seg_data[v.name][j]) for v in by_table["segment"]}, lats[j], lons[j])
        for j in range(config.n_segments)
    ]

    # crashes placed uniformly on segments, milepost inside [begin, end)
    n = config.n_crashes
    seg_idx = rng.integers(0, config.n_segments, size=n)
    b = np.array(begins)[seg_idx]
    e = np.array(ends)[seg_idx]
    mp = np.floor((b + rng.random(n) * (e - b)) * 1000) / 1000
    mp = np.where(mp >= e, b, np.maximum(mp, b))
    crash_ids = [f"C{i:07d}" for i in range(n)]
    crash_vals = {v.name: v.sample(rng, n) for v in by_table["crash"]}

    extra_unit = rng.random(n) < config.multi_unit_rate
    n_units = n + int(extra_unit.sum())
    unit_vals = {v.name: v.sample(rng, n_units) for v in by_table["unit"]}
    person_vals = {v.name: v.sample(rng, n_units) for v in by_table["person"]}
    # file order: first unit of every crash, then second units; first occurrence is unit 1
    unit_crash = crash_ids + [crash_ids[i] for i in np.flatnonzero(extra_unit)]
    unit_no = ["1"] * n + ["2"] * int(extra_unit.sum())

    # features seen by the labeling model: first unit/person plus segment
    seen: dict[str, np.ndarray] = {}
    seen.update(crash_vals)
    seen.update({k: v[:n] for k, v in unit_vals.items()})
    seen.update({k: v[:n] for k, v in person_vals.items()})
    seen.update({k: np.asarray(v, dtype=object if v.dtype == object else np.float64)[seg_idx]
                 for k, v in seg_data.items()})

    labels = {}
    by_name = {v.name: v for v in config.variables}
    truth_effects = []
    for factor, rate in config.base_rates.items():
        logit = np.full(n, _logit(rate))
        for eff in config.effects:
            if eff.factor != factor:
                continue
            active = eff.active(seen[eff.feature])
            logit += math.log(eff.multiplier) * active
            truth_effects.append({
                **{k: v for k, v in asdict(eff).items() if v is not None},
                "log_odds": math.log(eff.multiplier),
                "model_feature": eff.model_feature(by_name[eff.feature]),
                "feature_class": by_name[eff.feature].feature_class,
                "active_fraction": float(active.mean()),
            })
        prob = 1.0 / (1.0 + np.exp(-logit))
        labels[factor] = (rng.random(n) < prob).astype(np.float64)

    crash_cols = [Column("crash_id", "identifier"), Column("route_id", "route_id", "static_road"),
                  Column("milepost", "milepost", "static_road")]
    crash_cols += [v.column() for v in by_table["crash"]]
    crash_cols += [Column(f, "target") for f in config.base_rates]
    crash = Frame(Schema(tuple(crash_cols)), {
        "crash_id": crash_ids, "route_id": [route_ids[j] for j in seg_idx], "milepost": mp,
        **crash_vals, **labels,
    })
    unit = Frame(Schema((Column("crash_id", "identifier"), Column("unit_no", "identifier"),
                         *[v.column() for v in by_table["unit"]])),
                 {"crash_id": unit_crash, "unit_no": unit_no, **unit_vals})
    person = Frame(Schema((Column("crash_id", "identifier"), Column("person_no", "identifier"),
                           *[v.column() for v in by_table["person"]])),
                   {"crash_id": unit_crash, "person_no": unit_no, **person_vals})

    truth = {
        "seed": config.seed,
        "n_crashes": n,
        "base_rates": dict(config.base_rates),
        "effects": truth_effects,
        "positive_rates": {f: float(labels[f].mean()) for f in labels},
    }
    schema_doc = {"tables": {
        "crash": crash.schema.to_dict(),
        "unit": unit.schema.to_dict(),
        "person": person.schema.to_dict(),
        "segments": seg_frame.schema.to_dict(),
    }}
    return SynthData(crash, unit, person, segments, seg_frame, truth, schema_doc)


def _py(v: Any) -> Any:
    return v.item() if isinstance(v, np.generic) else v


def write_dataset(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    """Write the CSV tables, a schema config, a coordinate sidecar and ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("crash", "unit", "person", "segments")}
    write_csv(data.crash, paths["crash"])
    write_csv(data.unit, paths["unit"])
    write_csv(data.person, paths["person"])
    write_csv(data.segment_frame, paths["segments"])
    coords = data.segment_frame.select(["route_id", "begin_mp", "end_mp", "lat", "lon"])
    paths["coordinates"] = out / "coordinates.csv"
    write_csv(coords, paths["coordinates"])
    paths["schema"] = out / "schema.yaml"
    paths["schema"].write_text(yaml.safe_dump(data.schema_doc, sort_keys=False), encoding="utf-8")
    paths["truth"] = out / "truth.json"
    paths["truth"].write_text(json.dumps(data.truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def load_gen_config(path: str | Path | None) -> GenConfig:
    if path is None:
        return GenConfig()
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return GenConfig.from_dict(doc.get("generate", doc))


__all__: Sequence[str] = [
    "GenConfig",
    "GenConfigError",
    "PlantedEffect",
    "SynthData",
    "Variable",
    "default_effects",
    "default_variables",
    "generate",
    "load_gen_config",
    "write_dataset",
]
