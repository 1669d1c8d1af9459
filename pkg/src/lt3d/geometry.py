"""Boxes, ground-plane distances, BEV overlap, camera projection and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .matching import Detection3D

AREA_EPS = 1e-9
ORTHONORMAL_TOL = 1e-6


class InvalidFieldError(ValueError):
    """A record field violates its type invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


def _finite_triple(values, name: str) -> tuple[float, float, float]:
    try:
        out = tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise InvalidFieldError(name, f"expected 3 numbers, got {values!r}") from None
    if len(out) != 3:
        raise InvalidFieldError(name, f"expected 3 numbers, got {len(out)}")
    if not all(math.isfinite(v) for v in out):
        raise InvalidFieldError(name, "values must be finite")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), size (length, width, height), yaw about +z.

    Length runs along the heading direction.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _finite_triple(self.center, "center"))
        size = _finite_triple(self.size, "size")
        if not all(s > 0 for s in size):
            raise InvalidFieldError("size", f"all components must be > 0, got {size}")
        object.__setattr__(self, "size", size)
        try:
            yaw = float(self.yaw)
        except (TypeError, ValueError):
            raise InvalidFieldError("yaw", f"expected a number, got {self.yaw!r}") from None
        if not math.isfinite(yaw):
            raise InvalidFieldError("yaw", "must be finite")
        object.__setattr__(self, "yaw", normalize_yaw(yaw))

    def bev_corners(self) -> np.ndarray:
        """4x2 ground-plane corners, counter-clockwise."""
        x, y, _ = self.center
        l, w, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([x, y])

    def corners(self) -> np.ndarray:
        """8x3 corners; first four at the bottom face, last four at the top."""
        bev = self.bev_corners()
        z, h = self.center[2], self.size[2]
        bottom = np.column_stack([bev, np.full(4, z - h / 2)])
        top = np.column_stack([bev, np.full(4, z + h / 2)])
        return np.vstack([bottom, top])


def ground_distance(a: Box3D, b: Box3D) -> float:
    """Center distance in the ground plane (z is ignored)."""
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


# -- BEV overlap -------------------------------------------------------------

def polygon_area(poly: Sequence[Sequence[float]]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_polygon(subject: Sequence[Sequence[float]], clip: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        def cross_point(p, q, sp, sq):
            t = sp / (sp - sq)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(cross_point(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                if s_prev > 0:
                    output.append(cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yawed footprints in the ground plane."""
    la, wa = a.size[0], a.size[1]
    lb, wb = b.size[0], b.size[1]
    # Circumscribed circles disjoint -> no overlap.
    reach = 0.5 * (math.hypot(la, wa) + math.hypot(lb, wb))
    if ground_distance(a, b) >= reach:
        return 0.0
    pa = a.bev_corners().tolist()
    pb = b.bev_corners().tolist()
    inter = clip_polygon(pa, pb)
    inter_area = abs(polygon_area(inter))
    if inter_area < AREA_EPS:
        return 0.0
    area_a = la * wa
    area_b = lb * wb
    union = area_a + area_b - inter_area
    return float(min(1.0, max(0.0, inter_area / union)))


# -- image plane -------------------------------------------------------------

@dataclass(frozen=True)
class Rect2D:
    """Axis-aligned pixel rectangle ``[u_min, u_max] x [v_min, v_max]``."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        raw = (self.u_min, self.v_min, self.u_max, self.v_max)
        try:
            vals = tuple(float(v) for v in raw)
        except (TypeError, ValueError):
            raise InvalidFieldError("rect", f"expected 4 numbers, got {raw}") from None
        if not all(math.isfinite(v) for v in vals):
            raise InvalidFieldError("rect", f"expected 4 finite numbers, got {raw}")
        for name, v in zip(("u_min", "v_min", "u_max", "v_max"), vals):
            object.__setattr__(self, name, v)
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise InvalidFieldError("rect", f"min must not exceed max, got {vals}")

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def as_list(self) -> list[float]:
        return [self.u_min, self.v_min, self.u_max, self.v_max]


def rect_iou(a: Rect2D, b: Rect2D) -> float:
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole camera with a world-to-camera rigid transform.

    Camera frame: +x right, +y down, +z along the optical axis.
    """

    camera_id: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    frame_id: str | None = None

    def __post_init__(self):
        if not isinstance(self.camera_id, str) or not self.camera_id:
            raise InvalidFieldError("camera_id", "must be a non-empty string")
        K = _matrix(self.intrinsics, (3, 3), "intrinsics")
        R = _matrix(self.rotation, (3, 3), "rotation")
        t = _matrix(self.translation, (3,), "translation")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise InvalidFieldError("intrinsics", "focal lengths must be > 0")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise InvalidFieldError("rotation", "matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidFieldError("rotation", "determinant must be +1")
        try:
            w, h = (int(v) for v in self.image_size)
        except (TypeError, ValueError):
            raise InvalidFieldError("image_size", f"expected (width, height), got {self.image_size!r}") from None
        if w <= 0 or h <= 0:
            raise InvalidFieldError("image_size", "width and height must be > 0")
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (w, h))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def _matrix(values, shape, name) -> np.ndarray:
    try:
        arr = np.array(values, dtype=float).reshape(shape)
    except (TypeError, ValueError):
        raise InvalidFieldError(name, f"expected {int(np.prod(shape))} numbers") from None
    if not np.all(np.isfinite(arr)):
        raise InvalidFieldError(name, "values must be finite")
    return arr


def project_box(box: Box3D, cal: CameraCalibration) -> Rect2D | None:
    """Image-plane bounding rectangle of a 3D box, or None when it is not visible.

    Only corners in front of the camera are projected, so a box straddling
    the image plane yields the hull of its visible corners.
    """
    cam = cal.world_to_camera(box.corners())
    depth = cam[:, 2]
    front = depth > 0
    if not front.any():
        return None
    pts = cam[front]
    uvw = pts @ cal.intrinsics.T
    u = uvw[:, 0] / uvw[:, 2]
    v = uvw[:, 1] / uvw[:, 2]
    w, h = cal.image_size
    u0 = min(max(float(u.min()), 0.0), float(w))
    u1 = min(max(float(u.max()), 0.0), float(w))
    v0 = min(max(float(v.min()), 0.0), float(h))
    v1 = min(max(float(v.max()), 0.0), float(h))
    if u1 <= u0 or v1 <= v0:
        return None
    return Rect2D(u0, v0, u1, v1)


# -- suppression -------------------------------------------------------------

NMS_MODES = ("center-distance", "bev-iou")
DEFAULT_NMS_THRESHOLD = 0.5


def _suppresses(kept: Box3D, cand: Box3D, mode: str, threshold: float) -> bool:
    if mode == "center-distance":
        return ground_distance(kept, cand) < threshold
    return bev_iou(kept, cand) > threshold


def within_class_nms(
    dets: Sequence["Detection3D"],
    mode: str = "center-distance",
    threshold: float = DEFAULT_NMS_THRESHOLD,
) -> list["Detection3D"]:
    """Greedy score-ordered suppression among detections of one class.

    Frames are handled independently. The result is ordered by descending
    score (ties by id).
    """
    if mode not in NMS_MODES:
        raise ValueError(f"unknown NMS mode {mode!r}; expected one of {NMS_MODES}")
    if not dets:
        return []
    classes = {d.class_name for d in dets}
    if len(classes) > 1:
        raise ValueError(f"within_class_nms got mixed classes: {sorted(classes)}")
    kept_by_frame: dict[str, list] = {}
    out = []
    for det in sorted(dets, key=lambda d: (-d.score, d.id)):
        kept = kept_by_frame.setdefault(det.frame_id, [])
        if any(_suppresses(k.box, det.box, mode, threshold) for k in kept):
            continue
        kept.append(det)
        out.append(det)
    return out


def nms_per_class(
    dets: Sequence["Detection3D"],
    mode: str = "center-distance",
    thresholds: float | Mapping[str, float] = DEFAULT_NMS_THRESHOLD,
    default_threshold: float = DEFAULT_NMS_THRESHOLD,
) -> list["Detection3D"]:
    """Run :func:`within_class_nms` separately for every class; output sorted by id."""
    by_class: dict[str, list] = {}
    for d in dets:
        by_class.setdefault(d.class_name, []).append(d)
    out = []
    for cls, group in by_class.items():
        if isinstance(thresholds, Mapping):
            thr = thresholds.get(cls, default_threshold)
        else:
            thr = thresholds
        out.extend(within_class_nms(group, mode, thr))
    return sorted(out, key=lambda d: d.id)
