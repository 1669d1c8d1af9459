"""Late LiDAR-camera fusion: radius filtering, 2D-overlap rescoring, score combination."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

from .geometry import CameraCalibration, InvalidFieldError, Rect2D, ground_distance, project_box, rect_iou
from .hierarchy import ClassHierarchy
from .matching import Detection3D, _check_name, _check_unit, group_by_frame

OVERLAP_RULES = ("any-overlap", "iou-floor")
SCORE_COMBINATIONS = (
    "fine-only",
    "object-times-fine",
    "coarse-times-fine",
    "object-times-coarse-times-fine",
)
# Alternate multiplier for detections with no image evidence (opt-in; the default leaves them unchanged).
DOWNWEIGHT_NONMATCH = 0.75


class MissingCalibrationError(KeyError):
    def __str__(self) -> str:
        return f"no calibration for {self.args[0]}"


class MissingAuxScoreError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class Detection2D:
    camera_id: str
    frame_id: str
    class_name: str
    rect: Rect2D
    score: float

    def __post_init__(self):
        _check_name(self.camera_id, "camera_id")
        _check_name(self.frame_id, "frame_id")
        _check_name(self.class_name, "class_name")
        if not isinstance(self.rect, Rect2D):
            raise InvalidFieldError("rect", "must be a Rect2D")
        object.__setattr__(self, "score", _check_unit(self.score, "score"))


@dataclass(frozen=True)
class FusionConfig:
    filter_radius: float = 4.0
    filter_class_aware: bool = True
    rescore_match_multiplier: float = 1.25
    rescore_nonmatch_multiplier: float = 1.0
    rescore_overlap_rule: str = "iou-floor"
    rescore_iou_floor: float = 0.1
    score_combination: str = "fine-only"

    def __post_init__(self):
        if not self.filter_radius > 0:
            raise ValueError("filter_radius must be > 0")
        if not (self.rescore_match_multiplier > 0 and self.rescore_nonmatch_multiplier > 0):
            raise ValueError("rescoring multipliers must be > 0")
        if self.rescore_overlap_rule not in OVERLAP_RULES:
            raise ValueError(f"rescore_overlap_rule must be one of {OVERLAP_RULES}")
        if not 0.0 <= self.rescore_iou_floor <= 1.0:
            raise ValueError("rescore_iou_floor must lie in [0, 1]")
        if self.score_combination not in SCORE_COMBINATIONS:
            raise ValueError(f"score_combination must be one of {SCORE_COMBINATIONS}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown fusion config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def filter_by_rgb(
    lidar: Sequence[Detection3D],
    rgb: Sequence[Detection3D],
    cfg: FusionConfig | None = None,
) -> list[Detection3D]:
    """Keep LiDAR detections that have an RGB detection within ``filter_radius``.

    With ``filter_class_aware`` the corroborating RGB detection must carry the
    same fine class. Input order is preserved.
    """
    cfg = cfg or FusionConfig()
    rgb_by_frame = group_by_frame(rgb)
    kept = []
    for det in lidar:
        for other in rgb_by_frame.get(det.frame_id, ()):
            if cfg.filter_class_aware and other.class_name != det.class_name:
                continue
            if ground_distance(det.box, other.box) < cfg.filter_radius:
                kept.append(det)
                break
    return kept


@dataclass
class RescoreStats:
    matched: int = 0
    unmatched: int = 0
    clamped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _label_matches(label: str, det_class: str, h: ClassHierarchy | None) -> bool:
    if label == det_class:
        return True
    # A coarse 2D label corroborates every fine class below it.
    return h is not None and h.is_fine(det_class) and h.parent[det_class] == label


def _overlaps(a: Rect2D, b: Rect2D, cfg: FusionConfig) -> bool:
    iou = rect_iou(a, b)
    if cfg.rescore_overlap_rule == "any-overlap":
        return iou > 0
    return iou > 0 and iou >= cfg.rescore_iou_floor


def rescore_with_stats(
    lidar: Sequence[Detection3D],
    rgb2d: Sequence[Detection2D],
    cals: Sequence[CameraCalibration],
    cfg: FusionConfig | None = None,
    hierarchy: ClassHierarchy | None = None,
) -> tuple[list[Detection3D], RescoreStats]:
    """Like :func:`rescore_by_rgb2d` but also report match and clamp counts."""
    cfg = cfg or FusionConfig()
    cams_by_frame: dict[str, list[CameraCalibration]] = {}
    for cal in cals:
        cams_by_frame.setdefault(cal.frame_id, []).append(cal)
    known = {(c.frame_id, c.camera_id) for c in cals}
    shared = {c.camera_id for c in cals if c.frame_id is None}
    boxes2d: dict[tuple[str, str], list[Detection2D]] = {}
    for d in rgb2d:
        if (d.frame_id, d.camera_id) not in known and d.camera_id not in shared:
            raise MissingCalibrationError(f"camera {d.camera_id!r} in frame {d.frame_id!r}")
        boxes2d.setdefault((d.frame_id, d.camera_id), []).append(d)

    stats = RescoreStats()
    out = []
    for det in lidar:
        matched = False
        for cal in cams_by_frame.get(det.frame_id, []) + cams_by_frame.get(None, []):
            candidates = boxes2d.get((det.frame_id, cal.camera_id))
            if not candidates:
                continue
            rect = project_box(det.box, cal)
            if rect is None:
                continue
            if any(
                _label_matches(c.class_name, det.class_name, hierarchy) and _overlaps(rect, c.rect, cfg)
                for c in candidates
            ):
                matched = True
                break
        factor = cfg.rescore_match_multiplier if matched else cfg.rescore_nonmatch_multiplier
        score = det.score * factor
        if score > 1.0:
            score = 1.0
            stats.clamped += 1
        if matched:
            stats.matched += 1
        else:
            stats.unmatched += 1
        out.append(det.with_score(score))
    return out, stats


def rescore_by_rgb2d(
    lidar: Sequence[Detection3D],
    rgb2d: Sequence[Detection2D],
    cals: Sequence[CameraCalibration],
    cfg: FusionConfig | None = None,
    hierarchy: ClassHierarchy | None = None,
) -> list[Detection3D]:
    """Scale LiDAR scores by whether their image projection overlaps a 2D detection.

    A detection matches when its projection into any camera of its frame
    satisfies the overlap rule against a same-class 2D detection in that
    camera. Matched scores are multiplied by ``rescore_match_multiplier``,
    the rest by ``rescore_nonmatch_multiplier``; results are clamped to 1.
    Pass ``hierarchy`` to let coarse 2D labels corroborate their fine classes.
    """
    return rescore_with_stats(lidar, rgb2d, cals, cfg, hierarchy)[0]


def filter_then_rescore(
    lidar: Sequence[Detection3D],
    rgb3d: Sequence[Detection3D],
    rgb2d: Sequence[Detection2D],
    cals: Sequence[CameraCalibration],
    cfg: FusionConfig | None = None,
    hierarchy: ClassHierarchy | None = None,
) -> list[Detection3D]:
    return rescore_by_rgb2d(filter_by_rgb(lidar, rgb3d, cfg), rgb2d, cals, cfg, hierarchy)


def combine_scores(det: Detection3D, mode: str = "fine-only") -> Detection3D:
    """Replace the fine-class score with a product of hierarchy-level scores."""
    if mode not in SCORE_COMBINATIONS:
        raise ValueError(f"unknown score combination {mode!r}")
    needed = {
        "fine-only": (),
        "object-times-fine": ("object",),
        "coarse-times-fine": ("coarse",),
        "object-times-coarse-times-fine": ("object", "coarse"),
    }[mode]
    score = det.score
    for key in needed:
        if key not in det.aux_scores:
            raise MissingAuxScoreError(f"detection {det.id} has no {key} score required by {mode!r}")
        score *= det.aux_scores[key]
    return det.with_score(score)


def combine_all(dets: Sequence[Detection3D], mode: str = "fine-only") -> list[Detection3D]:
    return [combine_scores(d, mode) for d in dets]
