"""Segment risk scoring with road-feature models, thresholding and heat-map export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .dataset import SegmentRecord
from .forest.model import FlavorError, ModelError, RandomForest
from .runlog import RunLog, emit

DEFAULT_THRESHOLD = 0.5


class CoordinateError(ValueError):
    pass


@dataclass(frozen=True)
class RiskScore:
    route_id: str
    begin_mp: float
    end_mp: float
    factor: str
    confidence: float
    lat: float | None = None
    lon: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class HeatmapPoint:
    lat: float
    lon: float
    weight: float
    factor: str

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise CoordinateError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise CoordinateError(f"longitude {self.lon} outside [-180, 180]")
        if not 0.5 < self.weight <= 1.0:
            raise ValueError(f"heat-map weight {self.weight} must be in (0.5, 1]; filter scores first")


def segment_feature_row(segment: SegmentRecord, features: Sequence[str]) -> np.ndarray:
    """Model-ordered feature vector for a raw segment record.

    Dummy features ``col=level`` are rebuilt from the segment's categorical
    value for ``col``.
    """
    out = np.empty(len(features))
    for j, name in enumerate(features):
        if name in segment.features:
            value = segment.features[name]
        elif "=" in name and name.split("=", 1)[0] in segment.features:
            col, level = name.split("=", 1)
            raw = segment.features[col]
            value = 1.0 if raw is not None and str(raw) == level else 0.0
        else:
            raise ModelError(
                f"segment {segment.route_id}:[{segment.begin_mp},{segment.end_mp}) "
                f"has no value for model feature {name!r}"
            )
        if value is None or (isinstance(value, float) and math.isnan(value)):
            raise ModelError(
                f"segment {segment.route_id}:[{segment.begin_mp},{segment.end_mp}) "
                f"is missing model feature {name!r}"
            )
        out[j] = float(value)
    return out


def score_segments(
    model: RandomForest,
    segments: Sequence[SegmentRecord],
    factor: str | None = None,
    log: RunLog | None = None,
) -> list[RiskScore]:
    """One :class:`RiskScore` per segment from a road-feature model."""
    if model.flavor != "road_feature":
        raise FlavorError(f"segment scoring needs a road_feature model, got {model.flavor!r}")
    factor = factor or model.target
    if not segments:
        return []
    X = np.vstack([segment_feature_row(s, model.features) for s in segments])
    conf = model.predict_matrix(X)
    emit(log, "segments_scored", factor=factor, count=len(segments))
    return [
        RiskScore(s.route_id, s.begin_mp, s.end_mp, factor, float(c), s.lat, s.lon)
        for s, c in zip(segments, conf)
    ]


def risk_profile(models: Mapping[str, RandomForest], segments: Sequence[SegmentRecord]) -> np.ndarray:
    """``(n_segments, n_factors)`` confidences, one column per model in mapping order."""
    cols = [[r.confidence for r in score_segments(m, segments, f)] for f, m in models.items()]
    return np.array(cols, dtype=np.float64).T.reshape(len(segments), len(models))


def filter_threshold(scores: Sequence[RiskScore], threshold: float = DEFAULT_THRESHOLD) -> list[RiskScore]:
    """Keep scores with confidence strictly above ``threshold``, in order."""
    return [s for s in scores if s.confidence > threshold]


def heatmap_points(scores: Sequence[RiskScore], log: RunLog | None = None) -> list[HeatmapPoint]:
    points = [HeatmapPoint(s.lat, s.lon, s.confidence, s.factor)
              for s in scores if s.lat is not None and s.lon is not None]
    skipped = len(scores) - len(points)
    emit(log, "heatmap_points", retained=len(scores), skipped_no_coordinates=skipped,
         exported=len(points))
    return points


def export_heatmap(
    scores: Sequence[RiskScore],
    path: str | Path,
    format: str = "geojson",
    log: RunLog | None = None,
) -> int:
    """Write thresholded scores as weighted points; returns the number written.

    Scores without coordinates are skipped and counted in the run log.
    """
    points = heatmap_points(scores, log)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lat", "lon", "weight", "factor"])
            for p in points:
                w.writerow([repr(p.lat), repr(p.lon), repr(p.weight), p.factor])
    elif format == "geojson":
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [p.lon, p.lat]},
                    "properties": {"weight": p.weight, "factor": p.factor},
                }
                for p in points
            ],
        }
        path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown heat-map format {format!r}")
    return len(points)


def read_heatmap_csv(path: str | Path) -> list[HeatmapPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            HeatmapPoint(float(r["lat"]), float(r["lon"]), float(r["weight"]), r["factor"])
            for r in csv.DictReader(fh)
        ]


def read_geojson(path: str | Path) -> list[HeatmapPoint]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise ValueError("not a GeoJSON FeatureCollection")
    out = []
    for feat in doc["features"]:
        lon, lat = feat["geometry"]["coordinates"]
        props = feat["properties"]
        out.append(HeatmapPoint(float(lat), float(lon), float(props["weight"]), props["factor"]))
    return out


def load_coordinates(path: str | Path) -> dict[tuple[str, float], tuple[float, float]]:
    """Read a ``route_id,begin_mp,end_mp,lat,lon`` sidecar keyed by (route, begin)."""
    coords = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            lat, lon = float(r["lat"]), float(r["lon"])
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise CoordinateError(f"bad coordinates for {r['route_id']}@{r['begin_mp']}: {lat}, {lon}")
            coords[(r["route_id"], float(r["begin_mp"]))] = (lat, lon)
    return coords


def attach_coordinates(
    segments: Sequence[SegmentRecord], coords: Mapping[tuple[str, float], tuple[float, float]]
) -> list[SegmentRecord]:
    out = []
    for s in segments:
        hit = coords.get((s.route_id, s.begin_mp))
        out.append(replace(s, lat=hit[0], lon=hit[1]) if hit else s)
    return out


SCORE_FIELDS = ["route_id", "begin_mp", "end_mp", "factor", "confidence", "lat", "lon"]


def write_scores_csv(scores: Sequence[RiskScore], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for s in scores:
            w.writerow([s.route_id, repr(s.begin_mp), repr(s.end_mp), s.factor, repr(s.confidence),
                        "" if s.lat is None else repr(s.lat), "" if s.lon is None else repr(s.lon)])


def read_scores_csv(path: str | Path) -> list[RiskScore]:
    def opt(v: str) -> Any:
        return float(v) if v != "" else None

    with open(path, newline="", encoding="utf-8") as fh:
        return [
            RiskScore(r["route_id"], float(r["begin_mp"]), float(r["end_mp"]), r["factor"],
                      float(r["confidence"]), opt(r["lat"]), opt(r["lon"]))
            for r in csv.DictReader(fh)
        ]
