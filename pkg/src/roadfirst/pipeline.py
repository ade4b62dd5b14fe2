"""End-to-end orchestration from one config file, with a reproducibility manifest.

Every stage is executed through the same argv the standalone subcommand
would take, and that argv is recorded in the manifest so any stage can be
re-run from the manifest alone.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .runlog import RunLog

MANIFEST_NAME = "manifest.json"
RUN_LOG_NAME = "run.log.jsonl"
INPUT_KEYS = ("schema", "crash", "unit", "person", "segments")


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def fingerprint(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _file_set(paths: list[str]) -> dict[str, str]:
    """Fingerprints of ``paths`` plus any schema sidecars next to them."""
    from .dataset import schema_path_for

    out = {}
    for p in paths:
        out[str(Path(p).resolve())] = fingerprint(p)
        side = schema_path_for(p)
        if side.exists():
            out[str(side.resolve())] = fingerprint(side)
    return out


@dataclass
class StageRecord:
    name: str
    argv: list[str]
    config_digest: str
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str]
    seconds: float
    status: str = "ok"
    error: str | None = None


@dataclass
class RunManifest:
    config: str
    seed: int
    workers: int
    stages: list[StageRecord] = field(default_factory=list)
    status: str = "running"
    external: dict[str, str] = field(default_factory=dict)  # raw inputs named by the config

    def to_dict(self) -> dict[str, Any]:
        return {"config": self.config, "seed": self.seed, "workers": self.workers, "status": self.status,
                "external": self.external, "stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunManifest:
        return cls(d["config"], d["seed"], d["workers"], [StageRecord(**s) for s in d["stages"]],
                   d["status"], d.get("external", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def stage(self, name: str) -> StageRecord:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(f"no stage {name!r} in manifest")

    def validate_chain(self) -> None:
        """Every stage input must be a raw config input or an earlier stage's output, unchanged."""
        produced: dict[str, str] = dict(self.external)
        for s in self.stages:
            if s.status != "ok":
                raise ValueError(f"stage {s.name} did not complete")
            for path, fp in s.inputs.items():
                if path not in produced:
                    raise ValueError(f"stage {s.name} reads {path}, which no earlier stage produced")
                if produced[path] != fp:
                    raise ValueError(f"stage {s.name} read {path} with a different fingerprint than produced")
            produced.update(s.outputs)


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 1,
    "out": "run",
    "keys": ["crash_id"],
    "factors": None,
    "missing": "impute",
    "vif": {"threshold": 10.0, "corr_threshold": 0.95, "max_iters": 100},
    "split": {"train_fraction": 0.8},
    "balance": {"undersample_ratio": None, "ratio": 1.0, "k": 5},
    "forest": {"trees": 100, "max_depth": None, "min_leaf": 5, "max_features": None, "hard_vote": False},
    "shap": {"background": 128, "rows": 500, "exact": False, "plots": True, "top": 20},
    "risk": {"threshold": 0.5, "formats": ["geojson", "csv"]},
}


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a run config, fill defaults, and resolve input paths against its directory.

    Raises :class:`~roadfirst.cli.ValidationError` for missing or bad inputs.
    """
    from .cli import ValidationError

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    unknown = set(doc) - set(DEFAULTS) - {"inputs"}
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg: dict[str, Any] = {}
    for key, default in DEFAULTS.items():
        given = doc.get(key)
        if isinstance(default, dict):
            given = given or {}
            bad = set(given) - set(default)
            if bad:
                raise ValidationError(f"{path}: unknown keys in {key}: {sorted(bad)}")
            cfg[key] = {**default, **given}
        else:
            cfg[key] = default if given is None else given
    inputs = doc.get("inputs") or {}
    base = path.parent
    resolved = {}
    for key in INPUT_KEYS + ("coordinates",):
        value = inputs.get(key)
        if value is None:
            if key in INPUT_KEYS:
                raise ValidationError(f"{path}: inputs.{key} is required")
            continue
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ValidationError(f"{path}: inputs.{key} not found: {p}")
        resolved[key] = p.resolve()
    cfg["inputs"] = resolved
    cfg["out"] = str(Path(cfg["out"]) if Path(cfg["out"]).is_absolute() else base / cfg["out"])
    return cfg


def _factors(cfg: dict[str, Any]) -> list[str]:
    from .dataset import load_schema

    schema = load_schema(cfg["inputs"]["schema"], "crash")
    targets = [c.name for c in schema.with_role("target")]
    factors = cfg["factors"] or targets
    missing = [f for f in factors if f not in targets]
    if missing:
        from .cli import ValidationError

        raise ValidationError(f"factors {missing} are not target columns of the crash table")
    return list(factors)


def _flag(value: Any) -> str:
    return "none" if value is None else str(value)


def plan(cfg: dict[str, Any]) -> list[tuple[str, list[str]]]:
    """Ordered (stage name, argv) pairs for a whole run."""
    out = Path(cfg["out"]).resolve()
    frames = out / "frames"
    inp = cfg["inputs"]
    log = ["--log", str(out / RUN_LOG_NAME)]
    seed = ["--seed", str(cfg["seed"])]
    workers = ["--workers", str(cfg["workers"])]
    stages: list[tuple[str, list[str]]] = []
    for table in ("crash", "unit", "person", "segments"):
        stages.append((f"ingest:{table}", ["ingest", "--input", str(inp[table]), "--schema", str(inp["schema"]),
                                           "--table", table, "--out", str(frames / f"{table}.csv"), *log]))
    stages.append(("join", ["join", *(x for t in ("crash", "unit", "person", "segments")
                                      for x in (f"--{t}", str(frames / f"{t}.csv"))),
                            "--keys", *cfg["keys"], "--out", str(frames / "joined.csv"), *log]))
    stages.append(("encode", ["encode", "--input", str(frames / "joined.csv"), "--missing", cfg["missing"],
                              "--out", str(frames / "encoded.csv"), *log]))
    v = cfg["vif"]
    stages.append(("vif", ["vif", "--input", str(frames / "encoded.csv"), "--threshold", str(v["threshold"]),
                           "--corr-threshold", str(v["corr_threshold"]), "--max-iters", str(v["max_iters"]),
                           "--out", str(frames / "reduced.csv"), *workers, *log]))
    b, f, s, r = cfg["balance"], cfg["forest"], cfg["shap"], cfg["risk"]
    for factor in _factors(cfg):
        d = out / "factors" / factor
        stages.append((f"split:{factor}", ["split", "--input", str(frames / "reduced.csv"), "--target", factor,
                                           "--train-fraction", str(cfg["split"]["train_fraction"]),
                                           "--out", str(d / "split"), *seed, *log]))
        stages.append((f"balance:{factor}", ["balance", "--input", str(d / "split" / "train.csv"),
                                             "--target", factor, "--undersample-ratio", _flag(b["undersample_ratio"]),
                                             "--ratio", str(b["ratio"]), "--k", str(b["k"]),
                                             "--out", str(d / "balanced.csv"), *seed, *log]))
        forest = ["--trees", str(f["trees"]), "--max-depth", _flag(f["max_depth"]), "--min-leaf", str(f["min_leaf"]),
                  "--max-features", _flag(f["max_features"]), *(["--hard-vote"] if f["hard_vote"] else [])]
        for flavor, name in (("combined_feature", "combined"), ("road_feature", "road")):
            stages.append((f"train:{factor}:{name}", [
                "train", "--input", str(d / "balanced.csv"), "--target", factor, "--flavor", flavor, *forest,
                "--test", str(d / "split" / "test.csv"), "--out", str(d / f"{name}_model.json"),
                *seed, *workers, *log]))
        stages.append((f"explain:{factor}", [
            "explain", "--model", str(d / "combined_model.json"), "--input", str(d / "split" / "test.csv"),
            "--background", str(d / "split" / "train.csv"), "--background-size", str(s["background"]),
            "--rows", str(s["rows"]), *(["--exact"] if s["exact"] else []), "--out", str(d / "shap"),
            *seed, *workers, *log]))
        if s["plots"]:
            stages.append((f"plot:{factor}", ["plot", "--shap", str(d / "shap" / "shap.csv"), "--top", str(s["top"]),
                                              "--out", str(d / "plots"), *log]))
        coords = ["--coordinates", str(inp["coordinates"])] if "coordinates" in inp else []
        stages.append((f"score:{factor}", ["score", "--model", str(d / "road_model.json"),
                                           "--segments", str(frames / "segments.csv"), *coords,
                                           "--factor", factor, "--out", str(d / "scores.csv"), *log]))
        for fmt in r["formats"]:
            ext = "geojson" if fmt == "geojson" else "csv"
            stages.append((f"heatmap:{factor}:{fmt}", [
                "heatmap", "--scores", str(d / "scores.csv"), "--threshold", str(r["threshold"]),
                "--format", fmt, "--out", str(d / f"heatmap.{ext}"), *log]))
    return stages


def _seed_of(argv: list[str]) -> int | None:
    return int(argv[argv.index("--seed") + 1]) if "--seed" in argv else None


def _digest(argv: list[str]) -> str:
    return hashlib.sha256(json.dumps(argv).encode()).hexdigest()


def run_stage(name: str, argv: list[str]) -> StageRecord:
    from .cli import execute

    start = time.perf_counter()
    io = execute(argv)
    return StageRecord(name, argv, _digest(argv), _seed_of(argv), _file_set(io["inputs"]),
                       _file_set(io["outputs"]), round(time.perf_counter() - start, 3))


def run_pipeline(config: str | Path, out: str | None = None, seed: int | None = None,
                 workers: int | None = None) -> Path:
    """Run every configured stage; returns the manifest path.

    Inputs are validated before any stage runs. On a stage failure the
    manifest records the completed stages plus the failed one and
    :class:`PipelineError` is raised.
    """
    cfg = load_config(config)
    if out is not None:
        cfg["out"] = str(Path(out).resolve())
    if seed is not None:
        cfg["seed"] = seed
    if workers is not None:
        cfg["workers"] = workers
    stages = plan(cfg)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / RUN_LOG_NAME
    log_path.unlink(missing_ok=True)
    RunLog(log_path).emit("run_started", config=str(Path(config).resolve()), seed=cfg["seed"],
                          workers=cfg["workers"], stages=[n for n, _ in stages])
    manifest = RunManifest(str(Path(config).resolve()), cfg["seed"], cfg["workers"],
                           external=_file_set([str(p) for p in cfg["inputs"].values()]))
    mpath = out_dir / MANIFEST_NAME
    for name, argv in stages:
        try:
            record = run_stage(name, argv)
        except Exception as exc:
            manifest.stages.append(StageRecord(name, argv, _digest(argv), _seed_of(argv), {}, {}, 0.0,
                                               "failed", f"{type(exc).__name__}: {exc}"))
            manifest.status = "failed"
            manifest.save(mpath)
            raise PipelineError(name, exc) from exc
        manifest.stages.append(record)
        manifest.save(mpath)
    manifest.status = "ok"
    manifest.save(mpath)
    RunLog(log_path).emit("run_finished", stages=len(stages))
    return mpath


def rerun_stage(manifest: str | Path, name: str) -> StageRecord:
    """Re-execute one recorded stage and check its outputs reproduce byte-for-byte."""
    m = RunManifest.load(manifest)
    rec = m.stage(name)
    for path, fp in rec.inputs.items():
        if not Path(path).exists() or fingerprint(path) != fp:
            raise ValueError(f"input {path} of stage {name} changed since the recorded run")
    again = run_stage(name, rec.argv)
    if again.outputs != rec.outputs:
        changed = sorted(p for p in rec.outputs if again.outputs.get(p) != rec.outputs[p])
        raise ValueError(f"stage {name} did not reproduce: {changed}")
    return again
