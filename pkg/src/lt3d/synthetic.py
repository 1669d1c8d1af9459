"""Synthetic scenes with a controlled detector error model.

A scene is drawn from a :class:`SyntheticSpec`: ground truth per class at a
given rate, one LiDAR detection per object (with center noise, sibling class
flips and a score), Poisson false positives, and optionally the RGB side
(3D detections, 2D detections and camera calibrations) needed to exercise
fusion. The ledger records where every detection came from.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .fusion import Detection2D
from .geometry import Box3D, CameraCalibration, Rect2D, project_box
from .hierarchy import ClassHierarchy, load_hierarchy, siblings
from .matching import Detection3D, GroundTruth3D


class SyntheticSpecError(ValueError):
    pass


COARSE_SIZES = {
    "vehicle": (4.5, 1.9, 1.7),
    "pedestrian": (0.8, 0.8, 1.75),
    "movable": (0.6, 0.6, 1.0),
}
DEFAULT_SIZE = (1.0, 1.0, 1.0)

CAMERA_FOCAL = 1266.0
IMAGE_SIZE = (1600, 900)
CAMERA_HEIGHT = 1.5


@dataclass(frozen=True)
class ScoreModel:
    """Beta distributions for the confidence of true and false detections."""

    tp_alpha: float = 5.0
    tp_beta: float = 2.0
    fp_alpha: float = 2.0
    fp_beta: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise SyntheticSpecError(f"score_model.{f.name} must be > 0")


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    num_frames: int = 10
    class_distribution: Mapping[str, float] = field(default_factory=lambda: {"car": 5.0, "adult": 3.0})
    localization_noise_sigma: float = 0.0
    sibling_confusion_rate: float = 0.0
    fp_rate_per_frame: float = 0.0
    score_model: ScoreModel = field(default_factory=ScoreModel)
    hierarchy: str = "nuscenes"
    extent: float = 50.0
    min_separation: float = 0.0
    emit_aux_scores: bool = True
    rgb_recall: float = 0.9
    rgb_localization_sigma: float = 1.0
    rgb_pixel_sigma: float = 2.0
    num_cameras: int = 6

    def __post_init__(self):
        if isinstance(self.score_model, Mapping):
            object.__setattr__(self, "score_model", ScoreModel(**self.score_model))
        checks = [
            (isinstance(self.seed, int) and not isinstance(self.seed, bool), "seed must be an integer"),
            (isinstance(self.num_frames, int) and self.num_frames >= 0, "num_frames must be a non-negative integer"),
            (all(v >= 0 for v in self.class_distribution.values()), "class_distribution rates must be >= 0"),
            (self.localization_noise_sigma >= 0, "localization_noise_sigma must be >= 0"),
            (0 <= self.sibling_confusion_rate <= 1, "sibling_confusion_rate must lie in [0, 1]"),
            (self.fp_rate_per_frame >= 0, "fp_rate_per_frame must be >= 0"),
            (self.extent > 0, "extent must be > 0"),
            (self.min_separation >= 0, "min_separation must be >= 0"),
            (0 <= self.rgb_recall <= 1, "rgb_recall must lie in [0, 1]"),
            (self.rgb_localization_sigma >= 0, "rgb_localization_sigma must be >= 0"),
            (self.rgb_pixel_sigma >= 0, "rgb_pixel_sigma must be >= 0"),
            (isinstance(self.num_cameras, int) and self.num_cameras >= 0, "num_cameras must be a non-negative integer"),
        ]
        for ok, msg in checks:
            if not ok:
                raise SyntheticSpecError(msg)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SyntheticSpec":
        if not isinstance(doc, Mapping):
            raise SyntheticSpecError("synthetic spec must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic spec fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SyntheticSpecError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_distribution"] = dict(self.class_distribution)
        return d


@dataclass(frozen=True)
class LedgerEntry:
    detection_id: int
    frame_id: str
    detected_class: str
    source_gt_id: int | None
    true_class: str | None
    flipped: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    frame_ids: list[str]
    groundtruth: list[GroundTruth3D]
    detections: list[Detection3D]
    ledger: list[LedgerEntry]
    rgb_detections: list[Detection3D]
    rgb_detections_2d: list[Detection2D]
    calibrations: list[CameraCalibration]


def ring_cameras(num_cameras: int, frame_id: str | None = None) -> list[CameraCalibration]:
    """Cameras at the ego origin facing evenly spaced headings, +x first."""
    K = np.array([[CAMERA_FOCAL, 0.0, IMAGE_SIZE[0] / 2], [0.0, CAMERA_FOCAL, IMAGE_SIZE[1] / 2], [0.0, 0.0, 1.0]])
    cams = []
    for k in range(num_cameras):
        theta = 2.0 * math.pi * k / num_cameras
        c, s = math.cos(theta), math.sin(theta)
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        t = -R @ np.array([0.0, 0.0, CAMERA_HEIGHT])
        cams.append(CameraCalibration(f"cam{k}", K, R, t, IMAGE_SIZE, frame_id))
    return cams


def _size_for(h: ClassHierarchy, cls: str) -> tuple[float, float, float]:
    return COARSE_SIZES.get(h.parent.get(cls, ""), DEFAULT_SIZE)


def generate_scene(spec: SyntheticSpec) -> Scene:
    """Draw a scene; the output is a pure function of ``spec``."""
    h = load_hierarchy(spec.hierarchy)
    classes = list(spec.class_distribution)
    for c in classes:
        if not h.is_fine(c):
            raise SyntheticSpecError(f"class_distribution names {c!r}, which is not a fine class")
    sib = {c: sorted(siblings(h, c)) for c in classes}

    gt_rng, det_rng, rgb_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    sm = spec.score_model

    frame_ids = [f"frame-{i:05d}" for i in range(spec.num_frames)]
    gts: list[GroundTruth3D] = []
    dets: list[Detection3D] = []
    ledger: list[LedgerEntry] = []
    rgb3d: list[Detection3D] = []
    rgb2d: list[Detection2D] = []
    cals: list[CameraCalibration] = []

    def place(existing: list[tuple[float, float]]) -> tuple[float, float]:
        for _ in range(10_000):
            x, y = gt_rng.uniform(-spec.extent, spec.extent, size=2)
            if all(math.hypot(x - ex, y - ey) >= spec.min_separation for ex, ey in existing):
                return float(x), float(y)
        raise SyntheticSpecError("could not place objects at the requested min_separation; enlarge extent")

    def scores(alpha: float, beta: float) -> tuple[float, dict]:
        s = float(det_rng.beta(alpha, beta))
        aux = {}
        coarse, obj = (float(v) for v in det_rng.beta(alpha, beta, size=2))
        if spec.emit_aux_scores:
            aux = {"coarse": coarse, "object": obj}
        return s, aux

    for frame_id in frame_ids:
        frame_cams = ring_cameras(spec.num_cameras, frame_id)
        cals.extend(frame_cams)
        frame_gts: list[GroundTruth3D] = []
        centers: list[tuple[float, float]] = []
        for cls in classes:
            n = int(gt_rng.poisson(spec.class_distribution[cls]))
            size = _size_for(h, cls)
            for _ in range(n):
                x, y = place(centers)
                centers.append((x, y))
                yaw = float(gt_rng.uniform(-math.pi, math.pi))
                box = Box3D((x, y, size[2] / 2), size, yaw)
                frame_gts.append(GroundTruth3D(len(gts) + len(frame_gts), frame_id, cls, box))
        gts.extend(frame_gts)

        for g in frame_gts:
            dx, dy = det_rng.normal(0.0, 1.0, size=2) * spec.localization_noise_sigma
            flip_draw = float(det_rng.uniform())
            pick = int(det_rng.integers(0, max(1, len(sib[g.class_name]))))
            flipped = bool(sib[g.class_name]) and flip_draw < spec.sibling_confusion_rate
            label = sib[g.class_name][pick] if flipped else g.class_name
            s, aux = scores(sm.tp_alpha, sm.tp_beta)
            cx, cy, cz = g.box.center
            box = Box3D((cx + float(dx), cy + float(dy), cz), g.box.size, g.box.yaw)
            det = Detection3D(len(dets), frame_id, label, box, s, aux)
            dets.append(det)
            ledger.append(LedgerEntry(det.id, frame_id, label, g.id, g.class_name, flipped))

        n_fp = int(det_rng.poisson(spec.fp_rate_per_frame)) if classes else 0
        for _ in range(n_fp):
            cls = classes[int(det_rng.integers(0, len(classes)))]
            x, y = det_rng.uniform(-spec.extent, spec.extent, size=2)
            yaw = float(det_rng.uniform(-math.pi, math.pi))
            size = _size_for(h, cls)
            s, aux = scores(sm.fp_alpha, sm.fp_beta)
            det = Detection3D(len(dets), frame_id, cls, Box3D((float(x), float(y), size[2] / 2), size, yaw), s, aux)
            dets.append(det)
            ledger.append(LedgerEntry(det.id, frame_id, cls, None, None, False))

        for g in frame_gts:
            seen_3d = float(rgb_rng.uniform()) < spec.rgb_recall
            seen_2d = float(rgb_rng.uniform()) < spec.rgb_recall
            dx, dy = rgb_rng.normal(0.0, 1.0, size=2) * spec.rgb_localization_sigma
            s3 = float(rgb_rng.beta(sm.tp_alpha, sm.tp_beta))
            if seen_3d:
                cx, cy, cz = g.box.center
                box = Box3D((cx + float(dx), cy + float(dy), cz), g.box.size, g.box.yaw)
                rgb3d.append(Detection3D(len(rgb3d), frame_id, g.class_name, box, s3))
            for cam in frame_cams:
                jitter = rgb_rng.normal(0.0, 1.0, size=4) * spec.rgb_pixel_sigma
                s2 = float(rgb_rng.beta(sm.tp_alpha, sm.tp_beta))
                rect = project_box(g.box, cam)
                if rect is None or not seen_2d:
                    continue
                w, hgt = cam.image_size
                u = sorted(min(max(v, 0.0), float(w)) for v in (rect.u_min + jitter[0], rect.u_max + jitter[1]))
                v = sorted(min(max(q, 0.0), float(hgt)) for q in (rect.v_min + jitter[2], rect.v_max + jitter[3]))
                rgb2d.append(Detection2D(cam.camera_id, frame_id, g.class_name, Rect2D(u[0], v[0], u[1], v[1]), s2))

    return Scene(frame_ids, gts, dets, ledger, rgb3d, rgb2d, cals)


SCENE_FILES = {
    "groundtruth": "groundtruth.json",
    "detections": "detections.json",
    "ledger": "ledger.json",
    "rgb_detections": "rgb_detections.json",
    "rgb_detections_2d": "rgb_detections_2d.json",
    "calibrations": "calibrations.json",
}


def save_scene(scene: Scene, outdir) -> dict[str, Path]:
    """Write every scene artifact into ``outdir``; returns name -> path."""
    from . import io

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {name: outdir / fname for name, fname in SCENE_FILES.items()}
    io.save_groundtruth(paths["groundtruth"], scene.groundtruth, scene.frame_ids)
    io.save_detections(paths["detections"], scene.detections, scene.frame_ids)
    io.save_json(paths["ledger"], "ledger", {"entries": [e.to_dict() for e in scene.ledger]}, line_lists=("entries",))
    io.save_detections(paths["rgb_detections"], scene.rgb_detections, scene.frame_ids)
    io.save_detections_2d(paths["rgb_detections_2d"], scene.rgb_detections_2d, scene.frame_ids)
    io.save_calibrations(paths["calibrations"], scene.calibrations)
    return paths


def load_ledger(path) -> list[LedgerEntry]:
    from . import io

    doc = io.read_json(path, "ledger")
    return [LedgerEntry(**e) for e in doc.get("entries", [])]
