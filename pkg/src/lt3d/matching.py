"""TP / FP / ignored labeling of detections against ground truth.

One engine serves plain AP (``lca_level=0``) and hierarchical AP
(``lca_level`` 1 or 2): true positives are always same-class matches, and the
LCA level only decides which near-miss predictions are ignored instead of
counted as false positives.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .geometry import Box3D, InvalidFieldError
from .hierarchy import ClassHierarchy, UnknownClassError, lca_distance

AUX_KEYS = ("coarse", "object")


def _check_unit(value, name: str) -> float:
    if isinstance(value, bool):
        raise InvalidFieldError(name, f"expected a number, got {value!r}")
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise InvalidFieldError(name, f"expected a number, got {value!r}") from None
    if not (0.0 <= v <= 1.0):
        raise InvalidFieldError(name, f"must be in [0, 1], got {v}")
    return v


def _check_name(value, name: str) -> str:
    if not isinstance(value, str) or not value:
        raise InvalidFieldError(name, f"must be a non-empty string, got {value!r}")
    return value


@dataclass(frozen=True)
class Detection3D:
    id: int
    frame_id: str
    class_name: str
    box: Box3D
    score: float
    aux_scores: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        _check_name(self.frame_id, "frame_id")
        _check_name(self.class_name, "class_name")
        object.__setattr__(self, "score", _check_unit(self.score, "score"))
        aux = {}
        for key, val in (self.aux_scores or {}).items():
            if key not in AUX_KEYS:
                raise InvalidFieldError("aux_scores", f"unknown key {key!r}")
            aux[key] = _check_unit(val, f"{key}_score")
        object.__setattr__(self, "aux_scores", MappingProxyType(aux))

    def with_score(self, score: float) -> "Detection3D":
        return Detection3D(self.id, self.frame_id, self.class_name, self.box, score, dict(self.aux_scores))

    def __eq__(self, other):
        if not isinstance(other, Detection3D):
            return NotImplemented
        return (
            self.id == other.id
            and self.frame_id == other.frame_id
            and self.class_name == other.class_name
            and self.box == other.box
            and self.score == other.score
            and dict(self.aux_scores) == dict(other.aux_scores)
        )

    def __hash__(self):
        return hash((self.id, self.frame_id, self.class_name, self.box, self.score))

    def __reduce__(self):
        # mappingproxy does not pickle; rebuild from a plain dict (needed by worker pools)
        return (Detection3D, (self.id, self.frame_id, self.class_name, self.box, self.score, dict(self.aux_scores)))


@dataclass(frozen=True)
class GroundTruth3D:
    id: int
    frame_id: str
    class_name: str
    box: Box3D

    def __post_init__(self):
        _check_name(self.frame_id, "frame_id")
        _check_name(self.class_name, "class_name")


class Verdict(str, enum.Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "Ignored"


@dataclass(frozen=True)
class MatchVerdict:
    detection_id: int
    verdict: Verdict
    score: float
    matched_gt_id: int | None = None

    def __post_init__(self):
        if (self.verdict == Verdict.TP) != (self.matched_gt_id is not None):
            raise ValueError("a verdict carries a matched GT id iff it is a TP")


def score_order(dets: Iterable[Detection3D]) -> list[Detection3D]:
    """Descending score, smaller id first on ties."""
    return sorted(dets, key=lambda d: (-d.score, d.id))


def check_classes(h: ClassHierarchy, items: Iterable, what: str) -> None:
    for item in items:
        if not h.is_fine(item.class_name):
            raise UnknownClassError(item.class_name, f"fine class in {what}")


def group_by_frame(items: Iterable) -> dict[str, list]:
    out: dict[str, list] = {}
    for item in items:
        out.setdefault(item.frame_id, []).append(item)
    return out


def match_frame(
    dets: Sequence[Detection3D],
    gts: Sequence[GroundTruth3D],
    class_name: str,
    ignore_classes: frozenset[str],
    threshold: float,
) -> list[MatchVerdict]:
    """Label the detections of one frame. ``dets`` must already be score-ordered."""
    same = [g for g in gts if g.class_name == class_name]
    related = [g for g in gts if g.class_name in ignore_classes]
    taken: set[int] = set()
    out = []
    for det in dets:
        dx, dy = det.box.center[0], det.box.center[1]
        best = None
        best_dist = math.inf
        for g in same:
            if g.id in taken:
                continue
            dist = math.hypot(dx - g.box.center[0], dy - g.box.center[1])
            if dist < threshold and (dist < best_dist or (dist == best_dist and g.id < best.id)):
                best, best_dist = g, dist
        if best is not None:
            taken.add(best.id)
            out.append(MatchVerdict(det.id, Verdict.TP, det.score, best.id))
            continue
        near_related = any(
            math.hypot(dx - g.box.center[0], dy - g.box.center[1]) < threshold for g in related
        )
        verdict = Verdict.IGNORED if near_related else Verdict.FP
        out.append(MatchVerdict(det.id, verdict, det.score))
    return out


def ignore_set(h: ClassHierarchy, class_name: str, lca_level: int) -> frozenset[str]:
    """Fine classes whose nearby ground truth turns a miss into an ignore."""
    if lca_level == 0:
        return frozenset()
    return frozenset(
        c for c in h.fine_classes if c != class_name and lca_distance(h, class_name, c) <= lca_level
    )


def match_class(
    dets: Sequence[Detection3D],
    gts: Sequence[GroundTruth3D],
    h: ClassHierarchy,
    threshold: float,
    lca_level: int = 0,
    class_name: str | None = None,
) -> list[MatchVerdict]:
    """Match all detections of one class against the ground truth of every frame.

    Args:
        dets: detections, all of the same class.
        gts: ground truth of any classes; only frames that have detections
            matter.
        h: hierarchy used for the LCA ignore rule.
        threshold: ground-plane center distance (strict ``<``) for a match.
        lca_level: 0 for plain AP, 1 or 2 for hierarchical AP.
        class_name: class under evaluation; inferred from ``dets`` if omitted.

    Returns:
        One verdict per detection, ordered by descending score (ties by id).
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    if lca_level not in (0, 1, 2):
        raise ValueError(f"lca_level must be 0, 1 or 2, got {lca_level}")
    if class_name is None:
        if not dets:
            return []
        class_name = dets[0].class_name
    if not h.is_fine(class_name):
        raise UnknownClassError(class_name, "fine class")
    for d in dets:
        if d.class_name != class_name:
            raise ValueError(
                f"match_class for {class_name!r} got a detection of class {d.class_name!r} (id {d.id})"
            )
    check_classes(h, gts, "ground truth")

    ignore = ignore_set(h, class_name, lca_level)
    gts_by_frame = group_by_frame(gts)
    dets_by_frame = group_by_frame(dets)
    out: list[MatchVerdict] = []
    for frame_id in sorted(dets_by_frame):
        out.extend(
            match_frame(
                score_order(dets_by_frame[frame_id]),
                gts_by_frame.get(frame_id, ()),
                class_name,
                ignore,
                threshold,
            )
        )
    out.sort(key=lambda v: (-v.score, v.detection_id))
    return out
