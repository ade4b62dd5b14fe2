"""Command-line interface: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import dataset as ds
from .collinearity import reduce_multicollinearity
from .forest import RandomForest, TrainConfig, evaluate, fit_forest
from .resample import BalanceConfig, assert_no_synthetic, balance, train_test_split
from .risk import (
    attach_coordinates,
    export_heatmap,
    filter_threshold,
    load_coordinates,
    read_scores_csv,
    score_segments,
    write_scores_csv,
)
from .runlog import RunLog, emit
from .shap import (
    MAX_EXACT_FEATURES,
    ExactShapRefused,
    ShapValues,
    exact_shap,
    plot_summary,
    read_shap_csv,
    sample_background,
    summarize,
    tree_shap,
    write_shap_csv,
    write_summary_csv,
)
from .syngen import generate, load_gen_config, write_dataset

log = logging.getLogger("roadfirst")

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE = 0, 1, 2
NON_FEATURE_ROLES = ("identifier", "route_id", "milepost", "coordinate")


class ValidationError(Exception):
    """Bad flags, configuration, or missing inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _need(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _need_frame(path: str | Path, what: str) -> Path:
    p = _need(path, what)
    if not ds.schema_path_for(p).exists():
        raise ValidationError(f"{what} {p} has no schema sidecar {ds.schema_path_for(p).name}")
    return p


def _runlog(args) -> RunLog:
    if getattr(args, "log", None):
        return RunLog(args.log)
    return RunLog()


# -- stage handlers; each returns {"inputs": [...], "outputs": [...]} ---------


def cmd_generate(args) -> dict:
    cfg = load_gen_config(args.config)
    if args.n_crashes is not None:
        cfg.n_crashes = args.n_crashes
    if args.n_segments is not None:
        cfg.n_segments = args.n_segments
    if args.seed is not None:
        cfg.seed = args.seed
    paths = write_dataset(generate(cfg), args.out)
    return {"inputs": [], "outputs": [str(p) for p in paths.values()]}


def cmd_ingest(args) -> dict:
    src = _need(args.input, "input CSV")
    schema_file = _need(args.schema, "schema config")
    schema = ds.load_schema(schema_file, args.table)
    frame = ds.load_csv(src, schema)
    ds.save_frame(frame, args.out)
    emit(_runlog(args), "ingested", table=args.table, rows=frame.n_rows, columns=len(schema))
    return {"inputs": [str(src), str(schema_file)], "outputs": [args.out]}


def cmd_join(args) -> dict:
    paths = [_need_frame(p, name) for p, name in
             ((args.crash, "crash frame"), (args.unit, "unit frame"), (args.person, "person frame"))]
    rlog = _runlog(args)
    crash, unit, person = (ds.read_frame(p) for p in paths)
    joined = ds.join_records(crash, unit, person, args.keys, rlog)
    inputs = [str(p) for p in paths]
    if args.segments:
        seg_path = _need_frame(args.segments, "segment frame")
        segments, columns = ds.segments_from_frame(ds.read_frame(seg_path))
        joined = ds.map_to_segments(joined, segments, columns, rlog)
        inputs.append(str(seg_path))
    ds.save_frame(joined, args.out)
    return {"inputs": inputs, "outputs": [args.out]}


def cmd_encode(args) -> dict:
    src = _need_frame(args.input, "input frame")
    rlog = _runlog(args)
    frame = ds.encode_dummies(ds.read_frame(src))
    frame = ds.resolve_missing(frame, args.missing, rlog)
    ds.save_frame(frame, args.out)
    return {"inputs": [str(src)], "outputs": [args.out]}


def reduction_log_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".reduction.json")


def cmd_vif(args) -> dict:
    src = _need_frame(args.input, "input frame")
    frame = ds.read_frame(src)
    reduced, rlog = reduce_multicollinearity(
        frame, args.threshold, args.corr_threshold, args.max_iters, args.workers, _runlog(args)
    )
    ds.save_frame(reduced, args.out)
    reduction_log_path(args.out).write_text(rlog.to_json(), encoding="utf-8")
    return {"inputs": [str(src)], "outputs": [args.out, str(reduction_log_path(args.out))]}


def cmd_split(args) -> dict:
    src = _need_frame(args.input, "input frame")
    train, test = train_test_split(ds.read_frame(src), args.target, args.train_fraction, args.seed)
    out = Path(args.out)
    ds.save_frame(train, out / "train.csv")
    ds.save_frame(test, out / "test.csv")
    emit(_runlog(args), "split", target=args.target, train=train.n_rows, test=test.n_rows)
    return {"inputs": [str(src)], "outputs": [str(out / "train.csv"), str(out / "test.csv")]}


def cmd_balance(args) -> dict:
    src = _need_frame(args.input, "input frame")
    cfg = BalanceConfig(args.undersample_ratio, args.ratio, args.k, args.seed)
    out = balance(ds.read_frame(src), args.target, cfg, _runlog(args))
    ds.save_frame(out, args.out)
    return {"inputs": [str(src)], "outputs": [args.out]}


def model_features(frame: ds.Frame, target: str, flavor: str, rlog: RunLog | None = None) -> list[str]:
    """Feature columns a model of ``flavor`` trains on.

    Identifiers, route ids, mileposts, coordinates and every non-target
    factor are never features; road-feature models also lose all dynamic
    columns. Dropped columns are logged.
    """
    dropped_roles = [c.name for c in frame.schema.columns
                     if c.role in NON_FEATURE_ROLES or (c.role == "target" and c.name != target)]
    feats = [c for c in frame.schema.features()]
    dynamic = []
    if flavor == "road_feature":
        dynamic = [c.name for c in feats if c.feature_class != "static_road"]
        feats = [c for c in feats if c.feature_class == "static_road"]
    emit(rlog, "train_columns_dropped", target=target, flavor=flavor,
         non_features=dropped_roles, dynamic=dynamic)
    return [c.name for c in feats]


def cmd_train(args) -> dict:
    src = _need_frame(args.input, "training frame")
    rlog = _runlog(args)
    frame = ds.read_frame(src)
    if args.target not in frame or frame.schema[args.target].role != "target":
        raise ValidationError(f"{args.target!r} is not a target column of {src}")
    features = model_features(frame, args.target, args.flavor, rlog)
    cfg = TrainConfig(args.trees, args.max_depth, args.min_leaf, args.max_features, args.seed, args.hard_vote)
    model = fit_forest(frame, args.target, cfg, features, args.flavor, args.workers)
    model.save(args.out)
    inputs, outputs = [str(src)], [args.out]
    if args.test:
        test_path = _need_frame(args.test, "test frame")
        test = ds.read_frame(test_path)
        assert_no_synthetic(test)
        metrics = evaluate(model, test, args.target)
        mpath = Path(args.out).with_suffix(".metrics.json")
        mpath.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        emit(rlog, "evaluated", target=args.target, flavor=args.flavor, **metrics)
        inputs.append(str(test_path))
        outputs.append(str(mpath))
    return {"inputs": inputs, "outputs": outputs}


def cmd_explain(args) -> dict:
    model_path = _need(args.model, "model file")
    src = _need_frame(args.input, "frame to explain")
    bg_path = _need_frame(args.background, "background frame")
    model = RandomForest.load(model_path)
    if args.exact and model.n_features > MAX_EXACT_FEATURES:
        raise ValidationError(
            f"exact Shapley enumeration is limited to {MAX_EXACT_FEATURES} features and this model "
            f"has {model.n_features}; drop --exact to use the tree explainer"
        )
    frame = ds.read_frame(src)
    rows = sample_background(model.design(frame), args.rows, args.seed)
    ids = None
    if args.rows >= frame.n_rows:
        id_cols = frame.schema.with_role("identifier")
        ids = list(frame[id_cols[0].name]) if id_cols else None
    background = sample_background(model.design(ds.read_frame(bg_path)), args.background_size, args.seed)
    if args.exact:
        parts = [exact_shap(model, r, background) for r in rows]
        shap = ShapValues(np.vstack([p.values for p in parts]), parts[0].base, model.features,
                          rows, np.concatenate([p.output for p in parts]))
    else:
        shap = tree_shap(model, rows, background, workers=args.workers)
    summary = summarize(shap)
    out = Path(args.out)
    write_shap_csv(shap, out / "shap.csv", ids)
    write_summary_csv(summary, out / "summary.csv")
    emit(_runlog(args), "explained", rows=shap.n_rows, background=len(background),
         top=summary.top(5), max_efficiency_gap=float(shap.efficiency_gap().max()),
         value_function="interventional feature masking (no retraining)")
    return {"inputs": [str(model_path), str(src), str(bg_path)],
            "outputs": [str(out / "shap.csv"), str(out / "summary.csv")]}


def cmd_score(args) -> dict:
    model_path = _need(args.model, "model file")
    seg_path = _need_frame(args.segments, "segment frame")
    segments, _ = ds.segments_from_frame(ds.read_frame(seg_path))
    inputs = [str(model_path), str(seg_path)]
    if args.coordinates:
        coord_path = _need(args.coordinates, "coordinate sidecar")
        segments = attach_coordinates(segments, load_coordinates(coord_path))
        inputs.append(str(coord_path))
    model = RandomForest.load(model_path)
    scores = score_segments(model, segments, args.factor, _runlog(args))
    write_scores_csv(scores, args.out)
    return {"inputs": inputs, "outputs": [args.out]}


def cmd_heatmap(args) -> dict:
    src = _need(args.scores, "score file")
    rlog = _runlog(args)
    scores = read_scores_csv(src)
    kept = filter_threshold(scores, args.threshold)
    emit(rlog, "threshold_filter", threshold=args.threshold, scored=len(scores), retained=len(kept))
    export_heatmap(kept, args.out, args.format, rlog)
    return {"inputs": [str(src)], "outputs": [args.out]}


def cmd_plot(args) -> dict:
    src = _need(args.shap, "SHAP export")
    summary = read_shap_csv(src)
    dependence = args.dependence or summary.top(min(3, len(summary.features)))
    written = plot_summary(summary, args.out, args.top, dependence)
    return {"inputs": [str(src)], "outputs": [str(p) for p in written]}


def cmd_run(args) -> dict:
    from .pipeline import run_pipeline

    if args.config is None:
        raise ValidationError("run needs --config")
    manifest = run_pipeline(args.config, out=args.out, seed=args.seed, workers=args.workers)
    return {"inputs": [args.config], "outputs": [str(manifest)]}


def cmd_rerun(args) -> dict:
    from .pipeline import rerun_stage

    rerun_stage(_need(args.manifest, "manifest"), args.stage)
    return {"inputs": [args.manifest], "outputs": []}


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="YAML file supplying defaults for this command's options")
    p.add_argument("--out", help="output path")
    p.add_argument("--seed", type=int, default=None if not seed else 0, help="master seed")
    p.add_argument("--log", help="append JSON-lines run events to this file")
    p.add_argument("--workers", type=int, default=1, help="threads for parallel work")


def _opt_int(v: str) -> int | None:
    return None if v.lower() in ("none", "null") else int(v)


def _opt_float(v: str) -> float | None:
    return None if v.lower() in ("none", "null") else float(v)


HANDLERS: dict[str, Callable[[argparse.Namespace], dict]] = {}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roadfirst", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, handler, help_: str, seed: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        _common(p, seed)
        HANDLERS[name] = handler
        return p

    p = add("generate", cmd_generate, "write a synthetic dataset with planted effects", seed=False)
    p.add_argument("--n-crashes", type=int)
    p.add_argument("--n-segments", type=int)

    p = add("ingest", cmd_ingest, "validate a CSV against a schema config")
    p.add_argument("--input")
    p.add_argument("--schema")
    p.add_argument("--table", help="table name in a multi-table schema config")

    p = add("join", cmd_join, "join crash, unit, person frames and map crashes to segments")
    p.add_argument("--crash")
    p.add_argument("--unit")
    p.add_argument("--person")
    p.add_argument("--segments")
    p.add_argument("--keys", nargs="+", default=["crash_id"])

    p = add("encode", cmd_encode, "one-hot encode categoricals and resolve missing values")
    p.add_argument("--input")
    p.add_argument("--missing", choices=["impute", "drop_row"], default="impute")

    p = add("vif", cmd_vif, "iterative VIF / correlation reduction")
    p.add_argument("--input")
    p.add_argument("--threshold", type=float, default=10.0)
    p.add_argument("--corr-threshold", type=float, default=0.95)
    p.add_argument("--max-iters", type=int, default=100)

    p = add("split", cmd_split, "stratified train/test split")
    p.add_argument("--input")
    p.add_argument("--target")
    p.add_argument("--train-fraction", type=float, default=0.8)

    p = add("balance", cmd_balance, "RUMC followed by SMOTE-NC")
    p.add_argument("--input")
    p.add_argument("--target")
    p.add_argument("--undersample-ratio", type=_opt_float, default=None)
    p.add_argument("--ratio", type=float, default=1.0, help="target minority:majority ratio")
    p.add_argument("--k", type=int, default=5)

    p = add("train", cmd_train, "fit a random forest")
    p.add_argument("--input")
    p.add_argument("--target")
    p.add_argument("--flavor", choices=["combined_feature", "road_feature"], default="combined_feature")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=_opt_int, default=None)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--max-features", type=_opt_int, default=None)
    p.add_argument("--hard-vote", action="store_true")
    p.add_argument("--test", help="held-out frame; writes <model>.metrics.json")

    p = add("explain", cmd_explain, "Shapley attributions for a model")
    p.add_argument("--model")
    p.add_argument("--input", help="frame whose rows are explained")
    p.add_argument("--background", help="frame the background sample is drawn from")
    p.add_argument("--background-size", type=int, default=128)
    p.add_argument("--rows", type=int, default=500, help="explain at most this many rows")
    p.add_argument("--exact", action="store_true", help="brute-force enumeration (<= 15 features)")

    p = add("score", cmd_score, "score road segments with a road-feature model")
    p.add_argument("--model")
    p.add_argument("--segments")
    p.add_argument("--coordinates", help="route_id,begin_mp,end_mp,lat,lon sidecar")
    p.add_argument("--factor")

    p = add("heatmap", cmd_heatmap, "threshold scores and export heat-map points")
    p.add_argument("--scores")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--format", choices=["geojson", "csv"], default="geojson")

    p = add("plot", cmd_plot, "SVG charts from a SHAP export")
    p.add_argument("--shap")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--dependence", nargs="*")

    p = add("run", cmd_run, "run the whole pipeline from one config file", seed=False)
    p.set_defaults(workers=None)

    p = add("rerun", cmd_rerun, "re-execute one stage recorded in a run manifest", seed=False)
    p.add_argument("--manifest")
    p.add_argument("--stage")
    return parser


def parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config and args.command not in ("run", "generate"):
        cfg = _load_options(args.config, args.command)
        subparser = _subparser(parser, args.command)
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _load_options(path: str, command: str) -> dict[str, Any]:
    p = _need(path, "config file")
    with p.open(encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{p}: config must be a mapping")
    if command in doc and isinstance(doc[command], dict):
        doc = doc[command]
    return {k.replace("-", "_"): v for k, v in doc.items()}


def execute(argv: Sequence[str]) -> dict:
    """Parse and run one subcommand, raising on failure (used by the pipeline)."""
    args = parse(argv)
    if args.out is None and args.command not in ("run", "rerun"):
        raise ValidationError(f"{args.command} needs --out")
    return HANDLERS[args.command](args)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        execute(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ExactShapRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
