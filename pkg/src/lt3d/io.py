"""Reading and writing detections, ground truth, calibrations and reports.

Every artifact is a JSON document with a ``schema_version`` and ``kind``.
Writers put one record per line so files diff cleanly; readers accept any
valid JSON layout.
"""
from __future__ import annotations

import csv
import io as _stdio
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .fusion import Detection2D, FusionConfig
from .geometry import Box3D, CameraCalibration, InvalidFieldError, Rect2D
from .hierarchy import ClassHierarchy, UnknownClassError
from .matching import Detection3D, GroundTruth3D
from .metrics import APReport, ConfusionMatrix

SCHEMA_VERSION = "1.0"
SUPPORTED_VERSIONS = (SCHEMA_VERSION,)


class LoadError(ValueError):
    """Base class for file ingestion failures."""


class ParseError(LoadError):
    pass


class SchemaVersionError(LoadError):
    pass


class RecordError(LoadError):
    """A record failed validation; carries its position and the offending field."""

    def __init__(self, path, index: int, field: str | None, message: str, frame_id: str | None = None):
        where = f"record {index}"
        if frame_id is not None:
            where += f" (frame {frame_id!r})"
        detail = f"field {field!r}: " if field else ""
        super().__init__(f"{path}: {where}: {detail}{message}")
        self.path = path
        self.index = index
        self.field = field


# -- generic document handling ------------------------------------------------

def _read_document(path, kind: str) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    version = doc.get("schema_version")
    if version not in SUPPORTED_VERSIONS:
        raise SchemaVersionError(
            f"{path}: schema_version {version!r} not supported (expected one of {SUPPORTED_VERSIONS})"
        )
    if doc.get("kind", kind) != kind:
        raise SchemaVersionError(f"{path}: expected a {kind!r} document, got {doc.get('kind')!r}")
    return doc


def _dumps(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(", ", ": "), allow_nan=False)


def _write_document(path, kind: str, sections: Mapping[str, Any], line_lists: Sequence[str] = ()) -> None:
    """Write a document; lists named in ``line_lists`` get one element per line.

    Nested ``frames`` entries are themselves laid out with one record per line.
    """
    header = {"schema_version": SCHEMA_VERSION, "kind": kind}
    parts = []
    body = dict(header)
    body.update(sections)
    keys = sorted(body)
    for key in keys:
        value = body[key]
        if key in line_lists and isinstance(value, list):
            parts.append(f"  {json.dumps(key)}: " + _format_list(value, indent=2))
        else:
            parts.append(f"  {json.dumps(key)}: {_dumps(value)}")
    text = "{\n" + ",\n".join(parts) + "\n}\n"
    Path(path).write_text(text)


def _format_list(items: list, indent: int) -> str:
    if not items:
        return "[]"
    pad = " " * (indent + 2)
    lines = []
    for item in items:
        if isinstance(item, dict) and any(isinstance(v, list) and v and isinstance(v[0], dict) for v in item.values()):
            inner = []
            for k in sorted(item):
                v = item[k]
                if isinstance(v, list) and v and isinstance(v[0], dict):
                    inner.append(f"{pad}  {json.dumps(k)}: " + _format_list(v, indent + 4))
                else:
                    inner.append(f"{pad}  {json.dumps(k)}: {_dumps(v)}")
            lines.append(pad + "{\n" + ",\n".join(inner) + "\n" + pad + "}")
        else:
            lines.append(pad + _dumps(item))
    return "[\n" + ",\n".join(lines) + "\n" + " " * indent + "]"


def _require(record: Mapping, key: str):
    if key not in record:
        raise InvalidFieldError(key, "missing")
    return record[key]


def _number(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidFieldError(key, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise InvalidFieldError(key, "must be finite")
    return float(value)


def _numbers(value, key: str, n: int) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise InvalidFieldError(key, f"expected a list of {n} numbers, got {value!r}")
    return [_number(v, key) for v in value]


def _string(value, key: str) -> str:
    if not isinstance(value, str) or not value:
        raise InvalidFieldError(key, f"expected a non-empty string, got {value!r}")
    return value


def _box(record: Mapping) -> Box3D:
    return Box3D(
        tuple(_numbers(_require(record, "center"), "center", 3)),
        tuple(_numbers(_require(record, "size"), "size", 3)),
        _number(_require(record, "yaw"), "yaw"),
    )


def _frames(doc, path) -> list:
    frames = doc.get("frames")
    if not isinstance(frames, list):
        raise ParseError(f"{path}: 'frames' must be a list")
    for i, frame in enumerate(frames):
        if not isinstance(frame, dict) or not isinstance(frame.get("frame_id"), str) or not frame["frame_id"]:
            raise ParseError(f"{path}: frame {i} needs a non-empty string 'frame_id'")
    return frames


def _check_hierarchy(item, hierarchy: ClassHierarchy | None, coarse_ok: bool = False) -> None:
    if hierarchy is None:
        return
    name = item.class_name
    if hierarchy.is_fine(name) or (coarse_ok and name in hierarchy.coarse_classes):
        return
    raise InvalidFieldError("class_name", f"{name!r} is not a class of the hierarchy")


def _records(path, doc, list_key: str, build, hierarchy=None, coarse_ok=False) -> list:
    out = []
    index = 0
    for frame in _frames(doc, path):
        records = frame.get(list_key, [])
        if not isinstance(records, list):
            raise ParseError(f"{path}: frame {frame['frame_id']!r}: {list_key!r} must be a list")
        for rec in records:
            try:
                if not isinstance(rec, dict):
                    raise InvalidFieldError("record", "must be an object")
                item = build(index, frame["frame_id"], rec)
                _check_hierarchy(item, hierarchy, coarse_ok)
            except InvalidFieldError as exc:
                raise RecordError(path, index, exc.field, str(exc), frame["frame_id"]) from None
            out.append(item)
            index += 1
    return out


def _group_frames(items: Iterable, encode, list_key: str, frame_ids: Sequence[str] | None = None) -> list[dict]:
    frames: dict[str, list] = {}
    for fid in frame_ids or ():
        frames.setdefault(fid, [])
    for item in items:
        frames.setdefault(item.frame_id, []).append(encode(item))
    return [{"frame_id": fid, list_key: recs} for fid, recs in frames.items()]


# -- detections ---------------------------------------------------------------

DET_FIELDS = {"class_name", "center", "size", "yaw", "score", "coarse_score", "object_score"}
GT_FIELDS = {"class_name", "center", "size", "yaw"}


def _reject_unknown(rec: Mapping, allowed: set) -> None:
    extra = set(rec) - allowed
    if extra:
        raise InvalidFieldError(sorted(extra)[0], "unknown field")


def _build_detection(index: int, frame_id: str, rec: Mapping) -> Detection3D:
    _reject_unknown(rec, DET_FIELDS)
    aux = {}
    for key in ("coarse", "object"):
        if f"{key}_score" in rec:
            aux[key] = _number(rec[f"{key}_score"], f"{key}_score")
    return Detection3D(
        id=index,
        frame_id=frame_id,
        class_name=_string(_require(rec, "class_name"), "class_name"),
        box=_box(rec),
        score=_number(_require(rec, "score"), "score"),
        aux_scores=aux,
    )


def _build_gt(index: int, frame_id: str, rec: Mapping) -> GroundTruth3D:
    _reject_unknown(rec, GT_FIELDS)
    return GroundTruth3D(
        id=index,
        frame_id=frame_id,
        class_name=_string(_require(rec, "class_name"), "class_name"),
        box=_box(rec),
    )


def load_detections(path, hierarchy: ClassHierarchy | None = None) -> list[Detection3D]:
    """Detections in file order; ids are assigned 0, 1, 2, ... in that order."""
    doc = _read_document(path, "detections")
    return _records(path, doc, "detections", _build_detection, hierarchy)


def load_groundtruth(path, hierarchy: ClassHierarchy | None = None) -> list[GroundTruth3D]:
    doc = _read_document(path, "groundtruth")
    return _records(path, doc, "objects", _build_gt, hierarchy)


def _encode_box(box: Box3D) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw}


def _encode_detection(d: Detection3D) -> dict:
    rec = {"class_name": d.class_name, "score": d.score, **_encode_box(d.box)}
    for key, val in d.aux_scores.items():
        rec[f"{key}_score"] = val
    return rec


def save_detections(path, dets: Sequence[Detection3D], frame_ids: Sequence[str] | None = None) -> None:
    """Write detections grouped by frame (first-appearance order).

    ``frame_ids`` lists frames to emit even when they hold no detections.
    """
    frames = _group_frames(dets, _encode_detection, "detections", frame_ids)
    _write_document(path, "detections", {"frames": frames}, line_lists=("frames",))


def save_groundtruth(path, gts: Sequence[GroundTruth3D], frame_ids: Sequence[str] | None = None) -> None:
    frames = _group_frames(gts, lambda g: {"class_name": g.class_name, **_encode_box(g.box)}, "objects", frame_ids)
    _write_document(path, "groundtruth", {"frames": frames}, line_lists=("frames",))


# -- 2D detections --------------------------------------------------------------

DET2D_FIELDS = {"camera_id", "class_name", "rect", "score"}


def _build_detection_2d(index: int, frame_id: str, rec: Mapping) -> Detection2D:
    _reject_unknown(rec, DET2D_FIELDS)
    rect = _numbers(_require(rec, "rect"), "rect", 4)
    return Detection2D(
        camera_id=_string(_require(rec, "camera_id"), "camera_id"),
        frame_id=frame_id,
        class_name=_string(_require(rec, "class_name"), "class_name"),
        rect=Rect2D(*rect),
        score=_number(_require(rec, "score"), "score"),
    )


def load_detections_2d(path, hierarchy: ClassHierarchy | None = None) -> list[Detection2D]:
    doc = _read_document(path, "detections_2d")
    return _records(path, doc, "detections", _build_detection_2d, hierarchy, coarse_ok=True)


def save_detections_2d(path, dets: Sequence[Detection2D], frame_ids: Sequence[str] | None = None) -> None:
    def enc(d: Detection2D) -> dict:
        return {"camera_id": d.camera_id, "class_name": d.class_name, "rect": d.rect.as_list(), "score": d.score}

    frames = _group_frames(dets, enc, "detections", frame_ids)
    _write_document(path, "detections_2d", {"frames": frames}, line_lists=("frames",))


# -- calibrations ---------------------------------------------------------------

CAL_FIELDS = {"camera_id", "frame_id", "intrinsics", "rotation", "translation", "image_width", "image_height"}


def _int(value, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidFieldError(key, f"expected an integer, got {value!r}")
    return value


def load_calibrations(path) -> list[CameraCalibration]:
    doc = _read_document(path, "calibrations")
    records = doc.get("records")
    if not isinstance(records, list):
        raise ParseError(f"{path}: 'records' must be a list")
    out = []
    for i, rec in enumerate(records):
        try:
            if not isinstance(rec, dict):
                raise InvalidFieldError("record", "must be an object")
            _reject_unknown(rec, CAL_FIELDS)
            cal = CameraCalibration(
                camera_id=_string(_require(rec, "camera_id"), "camera_id"),
                frame_id=_string(_require(rec, "frame_id"), "frame_id"),
                intrinsics=_numbers(_require(rec, "intrinsics"), "intrinsics", 9),
                rotation=_numbers(_require(rec, "rotation"), "rotation", 9),
                translation=_numbers(_require(rec, "translation"), "translation", 3),
                image_size=(
                    _int(_require(rec, "image_width"), "image_width"),
                    _int(_require(rec, "image_height"), "image_height"),
                ),
            )
        except InvalidFieldError as exc:
            raise RecordError(path, i, exc.field, str(exc)) from None
        out.append(cal)
    return out


def save_calibrations(path, cals: Sequence[CameraCalibration]) -> None:
    records = [
        {
            "camera_id": c.camera_id,
            "frame_id": c.frame_id,
            "intrinsics": c.intrinsics.reshape(-1).tolist(),
            "rotation": c.rotation.reshape(-1).tolist(),
            "translation": c.translation.tolist(),
            "image_width": c.image_size[0],
            "image_height": c.image_size[1],
        }
        for c in cals
    ]
    _write_document(path, "calibrations", {"records": records}, line_lists=("records",))


# -- configs --------------------------------------------------------------------

def load_structured(path) -> Any:
    """Parse a JSON or YAML file (picked by extension; YAML otherwise)."""
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ParseError(f"{path}: {exc}") from None


def load_fusion_config(path) -> FusionConfig:
    doc = load_structured(path) or {}
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: fusion config must be a mapping")
    try:
        return FusionConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise LoadError(f"{path}: {exc}") from None


# -- reports --------------------------------------------------------------------

def report_document(report: APReport) -> dict:
    cells = [
        {"class_name": c, "threshold": t, "lca_level": l, "ap": ap}
        for (c, t, l), ap in report.per_class_threshold.items()
    ]
    per_class = [{"class_name": c, "lca_level": l, "ap": ap} for (c, l), ap in report.per_class.items()]
    buckets = [{"bucket": b.value, "lca_level": l, "map": v} for (b, l), v in report.buckets.items()]
    overall = [{"lca_level": l, "map": v} for l, v in report.overall.items()]
    classes = [
        {"class_name": c, "num_gt": report.num_gt[c], "bucket": report.bucket_of[c].value,
         "excluded": c in report.excluded_classes}
        for c in report.bucket_of
    ]
    return {
        "config": report.config.to_dict(),
        "classes": classes,
        "per_class_threshold": cells,
        "per_class": per_class,
        "buckets": buckets,
        "overall": overall,
        "excluded_classes": list(report.excluded_classes),
    }


def save_report(path, report: APReport) -> None:
    _write_document(
        path,
        "ap_report",
        report_document(report),
        line_lists=("classes", "per_class_threshold", "per_class", "buckets", "overall"),
    )


def report_csv(report: APReport) -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class_name", "threshold", "lca_level", "ap", "num_gt", "bucket"])
    for (c, t, l), ap in report.per_class_threshold.items():
        writer.writerow([c, repr(t), l, repr(ap), report.num_gt[c], report.bucket_of[c].value])
    return buf.getvalue()


def save_report_csv(path, report: APReport) -> None:
    Path(path).write_text(report_csv(report))


def confusion_document(cm: ConfusionMatrix) -> dict:
    return {
        "superclass": cm.superclass,
        "radius": cm.radius,
        "classes": list(cm.classes),
        "counts": cm.counts.tolist(),
        "rates": cm.rates.tolist(),
        "empty_rows": list(cm.empty_rows),
    }


def save_confusion(path, cm: ConfusionMatrix) -> None:
    _write_document(path, "confusion_matrix", confusion_document(cm), line_lists=("counts", "rates"))


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["gt_class"] + list(cm.classes))
    for name, row in zip(cm.classes, cm.rates.tolist()):
        writer.writerow([name] + [repr(v) for v in row])
    return buf.getvalue()


def save_confusion_csv(path, cm: ConfusionMatrix) -> None:
    Path(path).write_text(confusion_csv(cm))


def save_json(path, kind: str, sections: Mapping[str, Any], line_lists: Sequence[str] = ()) -> None:
    _write_document(path, kind, sections, line_lists)


def read_json(path, kind: str) -> dict:
    return _read_document(path, kind)


__all__ = [
    "LoadError",
    "ParseError",
    "RecordError",
    "SchemaVersionError",
    "UnknownClassError",
    "load_calibrations",
    "load_detections",
    "load_detections_2d",
    "load_fusion_config",
    "load_groundtruth",
    "save_calibrations",
    "save_confusion",
    "save_detections",
    "save_detections_2d",
    "save_groundtruth",
    "save_report",
    "save_report_csv",
]
