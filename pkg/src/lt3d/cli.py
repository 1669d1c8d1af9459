"""Command-line entry point: ``lt3d <subcommand> ...``.

Exit codes:
    0  success
    1  internal error
    2  usage error
    3  input file missing or unreadable
    4  parse or schema-version error
    5  record validation error
    6  hierarchy error or unknown class
    7  invalid configuration
    8  missing camera calibration
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .fusion import (
    DOWNWEIGHT_NONMATCH,
    OVERLAP_RULES,
    SCORE_COMBINATIONS,
    FusionConfig,
    MissingCalibrationError,
    combine_all,
    filter_by_rgb,
    rescore_with_stats,
)
from .geometry import NMS_MODES, nms_per_class
from .hierarchy import Bucket, HierarchyError, UnknownClassError, load_hierarchy
from .io import (
    LoadError,
    ParseError,
    RecordError,
    SchemaVersionError,
    load_calibrations,
    load_detections,
    load_detections_2d,
    load_fusion_config,
    load_groundtruth,
    load_structured,
    save_confusion,
    save_confusion_csv,
    save_detections,
    save_json,
    save_report,
    save_report_csv,
)
from .metrics import CONFUSION_RADIUS, DEFAULT_LCA_LEVELS, DEFAULT_THRESHOLDS, INTERPOLATIONS, EvalConfig, confusion_matrix, evaluate
from .synthetic import SyntheticSpec, SyntheticSpecError, generate_scene, save_scene

log = logging.getLogger("lt3d")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_RECORD = 5
EXIT_HIERARCHY = 6
EXIT_CONFIG = 7
EXIT_CALIBRATION = 8


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects what a subcommand read and wrote, then emits the manifest."""

    def __init__(self, subcommand: str, manifest_path):
        self.subcommand = subcommand
        self.manifest_path = Path(manifest_path) if manifest_path else None
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, dict] = {}
        self.config: dict = {}
        self.stats: dict = {}
        self.start = time.perf_counter()

    def input(self, name: str, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"{name}: no such file {str(path)!r}")
        self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}
        return path

    def output(self, name: str, path) -> None:
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def finish(self) -> None:
        if self.manifest_path is None:
            return
        save_json(
            self.manifest_path,
            "run_manifest",
            {
                "subcommand": self.subcommand,
                "config": self.config,
                "inputs": self.inputs,
                "outputs": self.outputs,
                "stats": self.stats,
                "tool_version": __version__,
                "duration_seconds": round(time.perf_counter() - self.start, 6),
            },
        )


def _default_manifest(output, override):
    return override if override else f"{output}.manifest.json"


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _hierarchy(run: Run, source: str):
    if Path(source).is_file():
        run.input("hierarchy", source)
    run.config["hierarchy"] = source
    return load_hierarchy(source)


def summary_table(report) -> str:
    cols = [b.value for b in Bucket] + ["All"]
    lines = ["".ljust(8) + "".join(c.rjust(9) for c in cols)]
    for lca in report.config.lca_levels:
        cells = []
        for b in Bucket:
            v = report.buckets.get((b, lca))
            cells.append("-" if v is None else f"{100 * v:.1f}")
        v = report.overall.get(lca)
        cells.append("-" if v is None else f"{100 * v:.1f}")
        lines.append(f"LCA={lca}".ljust(8) + "".join(c.rjust(9) for c in cells))
    return "\n".join(lines)


# -- subcommands ---------------------------------------------------------------

def cmd_eval(args) -> int:
    run = Run("eval", _default_manifest(args.report, args.manifest))
    h = _hierarchy(run, args.hierarchy)
    gts = load_groundtruth(run.input("groundtruth", args.gt), h)
    dets = load_detections(run.input("detections", args.det), h)
    counts = None
    if args.class_counts:
        counts = load_structured(run.input("class_counts", args.class_counts))
        if not isinstance(counts, dict):
            raise ValueError("class counts file must map class name -> count")
    cfg = EvalConfig(
        thresholds=args.thresholds,
        lca_levels=args.lca_levels,
        many_threshold=args.many_threshold,
        few_threshold=args.few_threshold,
        interpolation=args.interpolation,
        min_recall=args.min_recall,
        min_precision=args.min_precision,
        class_counts=counts,
        workers=args.workers,
    )
    if args.score_combination != "fine-only":
        dets = combine_all(dets, args.score_combination)
    run.config.update(cfg.to_dict())
    run.config["score_combination"] = args.score_combination
    report = evaluate(dets, gts, h, cfg)
    save_report(args.report, report)
    run.output("report", args.report)
    csv_path = args.csv or str(Path(args.report).with_suffix(".csv"))
    save_report_csv(csv_path, report)
    run.output("csv", csv_path)
    run.stats["excluded_classes"] = list(report.excluded_classes)
    print(summary_table(report))
    run.finish()
    return EXIT_OK


def _fusion_config(run: Run, args) -> FusionConfig:
    base = FusionConfig()
    if args.config:
        base = load_fusion_config(run.input("fusion_config", args.config))
    overrides = {}
    if getattr(args, "filter_radius", None) is not None:
        overrides["filter_radius"] = args.filter_radius
    if getattr(args, "class_agnostic", False):
        overrides["filter_class_aware"] = False
    if getattr(args, "match_multiplier", None) is not None:
        overrides["rescore_match_multiplier"] = args.match_multiplier
    if getattr(args, "nonmatch_multiplier", None) is not None:
        overrides["rescore_nonmatch_multiplier"] = args.nonmatch_multiplier
    if getattr(args, "downweight_unmatched", False):
        overrides["rescore_nonmatch_multiplier"] = DOWNWEIGHT_NONMATCH
    if getattr(args, "overlap_rule", None) is not None:
        overrides["rescore_overlap_rule"] = args.overlap_rule
    if getattr(args, "iou_floor", None) is not None:
        overrides["rescore_iou_floor"] = args.iou_floor
    if getattr(args, "score_combination", None) is not None:
        overrides["score_combination"] = args.score_combination
    cfg = FusionConfig.from_dict({**base.to_dict(), **overrides})
    run.config.update(cfg.to_dict())
    log.info("fusion config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _optional_hierarchy(run: Run, source):
    return _hierarchy(run, source) if source else None


def _write_detections(run: Run, path, dets) -> None:
    save_detections(path, dets)
    run.output("detections", path)
    run.stats["num_detections"] = len(dets)


def cmd_filter(args) -> int:
    run = Run("filter", _default_manifest(args.output, args.manifest))
    cfg = _fusion_config(run, args)
    h = _optional_hierarchy(run, args.hierarchy)
    lidar = load_detections(run.input("lidar", args.lidar), h)
    rgb = load_detections(run.input("rgb3d", args.rgb3d), h)
    _write_detections(run, args.output, filter_by_rgb(lidar, rgb, cfg))
    run.finish()
    return EXIT_OK


def cmd_rescore(args) -> int:
    run = Run("rescore", _default_manifest(args.output, args.manifest))
    cfg = _fusion_config(run, args)
    h = _optional_hierarchy(run, args.hierarchy)
    lidar = load_detections(run.input("lidar", args.lidar), h)
    rgb2d = load_detections_2d(run.input("rgb2d", args.rgb2d), h)
    cals = load_calibrations(run.input("calibrations", args.calibrations))
    out, stats = rescore_with_stats(lidar, rgb2d, cals, cfg, h)
    run.stats.update(stats.to_dict())
    _write_detections(run, args.output, out)
    run.finish()
    return EXIT_OK


def cmd_fuse(args) -> int:
    run = Run("fuse", _default_manifest(args.output, args.manifest))
    cfg = _fusion_config(run, args)
    h = _optional_hierarchy(run, args.hierarchy)
    lidar = load_detections(run.input("lidar", args.lidar), h)
    rgb3d = load_detections(run.input("rgb3d", args.rgb3d), h)
    rgb2d = load_detections_2d(run.input("rgb2d", args.rgb2d), h)
    cals = load_calibrations(run.input("calibrations", args.calibrations))
    if cfg.score_combination != "fine-only":
        lidar = combine_all(lidar, cfg.score_combination)
    kept = filter_by_rgb(lidar, rgb3d, cfg)
    out, stats = rescore_with_stats(kept, rgb2d, cals, cfg, h)
    run.stats.update(stats.to_dict())
    run.stats["num_filtered_out"] = len(lidar) - len(kept)
    _write_detections(run, args.output, out)
    run.finish()
    return EXIT_OK


def _class_thresholds(items: Sequence[str]) -> dict[str, float]:
    out = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--class-threshold expects NAME=VALUE, got {item!r}")
        out[name] = float(value)
    return out


def cmd_nms(args) -> int:
    run = Run("nms", _default_manifest(args.output, args.manifest))
    h = _optional_hierarchy(run, args.hierarchy)
    dets = load_detections(run.input("detections", args.input), h)
    per_class = _class_thresholds(args.class_threshold)
    run.config.update({"mode": args.mode, "threshold": args.threshold, "class_thresholds": per_class})
    if not args.threshold > 0 or any(not v > 0 for v in per_class.values()):
        raise ValueError("NMS thresholds must be > 0")
    out = nms_per_class(dets, args.mode, per_class, default_threshold=args.threshold)
    _write_detections(run, args.output, out)
    run.finish()
    return EXIT_OK


def cmd_confusion(args) -> int:
    run = Run("confusion", _default_manifest(args.output, args.manifest))
    h = _hierarchy(run, args.hierarchy)
    gts = load_groundtruth(run.input("groundtruth", args.gt), h)
    dets = load_detections(run.input("detections", args.det), h)
    run.config.update({"superclass": args.superclass, "radius": args.radius})
    cm = confusion_matrix(dets, gts, h, args.superclass, args.radius)
    save_confusion(args.output, cm)
    run.output("matrix", args.output)
    csv_path = args.csv or str(Path(args.output).with_suffix(".csv"))
    save_confusion_csv(csv_path, cm)
    run.output("csv", csv_path)
    run.stats["empty_rows"] = list(cm.empty_rows)
    run.finish()
    return EXIT_OK


def cmd_generate(args) -> int:
    outdir = Path(args.output_dir)
    run = Run("generate", _default_manifest(outdir / "scene", args.manifest))
    doc = load_structured(run.input("spec", args.spec))
    spec = SyntheticSpec.from_dict(doc or {})
    if args.seed is not None:
        spec = SyntheticSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    run.config.update(spec.to_dict())
    outdir.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(spec)
    for name, path in save_scene(scene, outdir).items():
        run.output(name, path)
    run.stats.update({"num_groundtruth": len(scene.groundtruth), "num_detections": len(scene.detections)})
    run.finish()
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lt3d", description="Long-tailed 3D detection evaluation and late fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def manifest_flag(sp):
        sp.add_argument("--manifest", help="run manifest path (default: <output>.manifest.json)")

    e = sub.add_parser("eval", help="mAP and hierarchical AP")
    e.add_argument("--gt", required=True, help="ground-truth file")
    e.add_argument("--det", required=True, help="detections file")
    e.add_argument("--hierarchy", default="nuscenes", help="preset name or hierarchy file (default: nuscenes)")
    e.add_argument("--thresholds", type=_floats, default=DEFAULT_THRESHOLDS,
                   help="center-distance thresholds in meters (default: 0.5,1,2,4)")
    e.add_argument("--lca-levels", type=_ints, default=DEFAULT_LCA_LEVELS, help="LCA levels (default: 0,1,2)")
    e.add_argument("--many-threshold", type=int, default=50_000, help="Many bucket: count > this (default 50000)")
    e.add_argument("--few-threshold", type=int, default=5_000, help="Few bucket: count < this (default 5000)")
    e.add_argument("--class-counts", help="JSON/YAML map class -> instance count used for bucketing")
    e.add_argument("--interpolation", choices=INTERPOLATIONS, default="101-point")
    e.add_argument("--min-recall", type=float, default=0.0)
    e.add_argument("--min-precision", type=float, default=0.0)
    e.add_argument("--score-combination", choices=SCORE_COMBINATIONS, default="fine-only")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--report", required=True, help="output report (JSON)")
    e.add_argument("--csv", help="output CSV (default: report path with .csv)")
    manifest_flag(e)
    e.set_defaults(func=cmd_eval)

    def fusion_common(sp):
        sp.add_argument("--lidar", required=True, help="LiDAR detections file")
        sp.add_argument("--config", help="fusion config (JSON/YAML)")
        sp.add_argument("--hierarchy", help="validate classes against this hierarchy")
        sp.add_argument("--output", required=True, help="output detections file")
        manifest_flag(sp)

    def filter_flags(sp):
        sp.add_argument("--rgb3d", required=True, help="RGB-based 3D detections file")
        sp.add_argument("--filter-radius", type=float, help="keep radius in meters (default 4.0)")
        sp.add_argument("--class-agnostic", action="store_true", help="any RGB class corroborates")

    def rescore_flags(sp):
        sp.add_argument("--rgb2d", required=True, help="2D detections file")
        sp.add_argument("--calibrations", required=True, help="camera calibration file")
        sp.add_argument("--match-multiplier", type=float, help="score factor on 2D match (default 1.25)")
        sp.add_argument("--nonmatch-multiplier", type=float, help="score factor without a match (default 1.0)")
        sp.add_argument("--downweight-unmatched", action="store_true",
                        help=f"use {DOWNWEIGHT_NONMATCH} for unmatched detections")
        sp.add_argument("--overlap-rule", choices=OVERLAP_RULES)
        sp.add_argument("--iou-floor", type=float)

    f = sub.add_parser("filter", help="keep LiDAR detections near RGB detections")
    fusion_common(f)
    filter_flags(f)
    f.set_defaults(func=cmd_filter)

    r = sub.add_parser("rescore", help="rescore LiDAR detections by 2D overlap")
    fusion_common(r)
    rescore_flags(r)
    r.set_defaults(func=cmd_rescore)

    fu = sub.add_parser("fuse", help="filter, then rescore")
    fusion_common(fu)
    filter_flags(fu)
    rescore_flags(fu)
    fu.add_argument("--score-combination", choices=SCORE_COMBINATIONS)
    fu.set_defaults(func=cmd_fuse)

    n = sub.add_parser("nms", help="within-class non-maximum suppression")
    n.add_argument("--input", required=True)
    n.add_argument("--output", required=True)
    n.add_argument("--mode", choices=NMS_MODES, default="center-distance")
    n.add_argument("--threshold", type=float, default=0.5, help="meters or IoU (default 0.5)")
    n.add_argument("--class-threshold", action="append", metavar="NAME=VALUE", help="per-class override")
    n.add_argument("--hierarchy")
    manifest_flag(n)
    n.set_defaults(func=cmd_nms)

    c = sub.add_parser("confusion", help="per-superclass confusion matrix")
    c.add_argument("--gt", required=True)
    c.add_argument("--det", required=True)
    c.add_argument("--hierarchy", default="nuscenes")
    c.add_argument("--superclass", required=True)
    c.add_argument("--radius", type=float, default=CONFUSION_RADIUS, help="match radius in meters (default 2.0)")
    c.add_argument("--output", required=True, help="matrix document (JSON)")
    c.add_argument("--csv", help="CSV path (default: output path with .csv)")
    manifest_flag(c)
    c.set_defaults(func=cmd_confusion)

    g = sub.add_parser("generate", help="synthetic scene with a known error model")
    g.add_argument("--spec", required=True, help="synthetic spec (JSON/YAML)")
    g.add_argument("--output-dir", required=True)
    g.add_argument("--seed", type=int, help="override the spec's seed")
    manifest_flag(g)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        code, msg = EXIT_IO, str(exc)
    except (ParseError, SchemaVersionError) as exc:
        code, msg = EXIT_PARSE, str(exc)
    except RecordError as exc:
        code, msg = EXIT_RECORD, str(exc)
    except (HierarchyError, UnknownClassError) as exc:
        code, msg = EXIT_HIERARCHY, str(exc)
    except MissingCalibrationError as exc:
        code, msg = EXIT_CALIBRATION, str(exc)
    except (SyntheticSpecError, LoadError, ValueError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except Exception as exc:  # pragma: no cover - defensive
        log.debug("unhandled error", exc_info=True)
        code, msg = EXIT_INTERNAL, f"internal error: {exc!r}"
    print(f"lt3d {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
