"""Average precision, mAP / hierarchical mAP aggregation, and confusion matrices."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .hierarchy import (
    DEFAULT_FEW_THRESHOLD,
    DEFAULT_MANY_THRESHOLD,
    Bucket,
    CardinalityBuckets,
    ClassHierarchy,
    UnknownClassError,
    bucket_classes,
)
from .matching import (
    Detection3D,
    GroundTruth3D,
    MatchVerdict,
    Verdict,
    check_classes,
    group_by_frame,
    ignore_set,
    match_frame,
    score_order,
)

RECALL_POINTS = 101
INTERPOLATIONS = ("101-point", "trapezoid")
DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
DEFAULT_LCA_LEVELS = (0, 1, 2)
CONFUSION_RADIUS = 2.0


@dataclass(frozen=True)
class PRCurve:
    """Precision/recall after each non-ignored verdict, in descending score order."""

    samples: tuple[tuple[float, float, float], ...]
    num_gt: int
    tp_counts: tuple[int, ...] = field(repr=False, default=())

    @property
    def precision(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    @property
    def recall(self) -> np.ndarray:
        return np.array([s[2] for s in self.samples])


def pr_curve(verdicts: Sequence[MatchVerdict], num_gt: int) -> PRCurve:
    if num_gt <= 0:
        raise ValueError("num_gt must be > 0; classes without ground truth are excluded upstream")
    ordered = sorted(
        (v for v in verdicts if v.verdict != Verdict.IGNORED),
        key=lambda v: (-v.score, v.detection_id),
    )
    tp = 0
    samples = []
    tps = []
    for k, v in enumerate(ordered, start=1):
        if v.verdict == Verdict.TP:
            tp += 1
        samples.append((v.score, tp / k, tp / num_gt))
        tps.append(tp)
    if tp > num_gt:
        raise ValueError(f"{tp} true positives for only {num_gt} ground-truth boxes")
    return PRCurve(tuple(samples), num_gt, tuple(tps))


def interpolated_precision(curve: PRCurve) -> list[float]:
    """Max precision at recall >= i/100 for i = 0..100 (0 where unreachable)."""
    out = [0.0] * RECALL_POINTS
    if not curve.samples:
        return out
    n = curve.num_gt
    # Running max from the right; recall >= i/100 is tested exactly on integers.
    best = 0.0
    j = len(curve.samples) - 1
    for i in range(RECALL_POINTS - 1, -1, -1):
        while j >= 0 and 100 * curve.tp_counts[j] >= i * n:
            best = max(best, curve.samples[j][1])
            j -= 1
        out[i] = best
    return out


def compute_ap(
    verdicts: Sequence[MatchVerdict],
    num_gt: int,
    interpolation: str = "101-point",
    min_recall: float = 0.0,
    min_precision: float = 0.0,
) -> float:
    """Area under the precision-recall curve for one class/threshold/LCA level.

    Ignored verdicts are dropped before sweeping. The default takes the mean
    of interpolated precision at 101 evenly spaced recall points.
    ``min_recall`` / ``min_precision`` enable devkit-style clipping: recall
    points at or below ``min_recall`` are skipped and precision is rescaled
    from ``[min_precision, 1]`` to ``[0, 1]``.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation!r}; expected one of {INTERPOLATIONS}")
    if not (0.0 <= min_recall < 1.0 and 0.0 <= min_precision < 1.0):
        raise ValueError("min_recall and min_precision must lie in [0, 1)")
    curve = pr_curve(verdicts, num_gt)
    prec = interpolated_precision(curve)

    if interpolation == "trapezoid":
        return _trapezoid_ap(curve)

    if min_recall > 0:
        first = int(round(min_recall * 100)) + 1
        prec = prec[first:]
    if not prec:
        return 0.0
    if min_precision > 0:
        prec = [max(p - min_precision, 0.0) / (1.0 - min_precision) for p in prec]
    return sum(prec) / len(prec)


def _trapezoid_ap(curve: PRCurve) -> float:
    if not curve.samples:
        return 0.0
    rec = [s[2] for s in curve.samples]
    prec = [s[1] for s in curve.samples]
    # Precision envelope, then trapezoids between successive recall values.
    for k in range(len(prec) - 2, -1, -1):
        prec[k] = max(prec[k], prec[k + 1])
    xs = [0.0] + rec
    ys = [prec[0]] + prec
    area = 0.0
    for k in range(1, len(xs)):
        area += (xs[k] - xs[k - 1]) * 0.5 * (ys[k] + ys[k - 1])
    return float(min(1.0, max(0.0, area)))


# -- full evaluation ---------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    lca_levels: tuple[int, ...] = DEFAULT_LCA_LEVELS
    many_threshold: int = DEFAULT_MANY_THRESHOLD
    few_threshold: int = DEFAULT_FEW_THRESHOLD
    interpolation: str = "101-point"
    min_recall: float = 0.0
    min_precision: float = 0.0
    # Instance counts used for bucketing (e.g. training-set counts); defaults
    # to the ground-truth counts of the evaluated data.
    class_counts: Mapping[str, int] | None = None
    workers: int = 1

    def __post_init__(self):
        thresholds = tuple(float(t) for t in self.thresholds)
        if not thresholds or any(not t > 0 for t in thresholds):
            raise ValueError("thresholds must be a non-empty list of positive distances")
        levels = tuple(int(x) for x in self.lca_levels)
        if not levels or any(x not in (0, 1, 2) for x in levels):
            raise ValueError("lca_levels must be a non-empty subset of {0, 1, 2}")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "lca_levels", levels)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "lca_levels": list(self.lca_levels),
            "many_threshold": self.many_threshold,
            "few_threshold": self.few_threshold,
            "interpolation": self.interpolation,
            "min_recall": self.min_recall,
            "min_precision": self.min_precision,
            "class_counts": dict(self.class_counts) if self.class_counts is not None else None,
        }


@dataclass
class APReport:
    per_class_threshold: dict[tuple[str, float, int], float]
    per_class: dict[tuple[str, int], float]
    buckets: dict[tuple[Bucket, int], float]
    overall: dict[int, float]
    num_gt: dict[str, int]
    bucket_of: dict[str, Bucket]
    excluded_classes: list[str]
    config: EvalConfig

    @property
    def classes(self) -> list[str]:
        return [c for c in self.bucket_of if c not in self.excluded_classes]


def _class_aps(args) -> dict[tuple[float, int], float]:
    cls, dets, gts_by_frame, ignore_by_level, num_gt, cfg = args
    dets_by_frame = group_by_frame(dets)
    ordered = {f: score_order(ds) for f, ds in dets_by_frame.items()}
    out = {}
    for thr in cfg.thresholds:
        for lca in cfg.lca_levels:
            verdicts = []
            for frame_id in sorted(ordered):
                verdicts.extend(
                    match_frame(ordered[frame_id], gts_by_frame.get(frame_id, ()), cls,
                                ignore_by_level[lca], thr)
                )
            out[(thr, lca)] = compute_ap(
                verdicts, num_gt, cfg.interpolation, cfg.min_recall, cfg.min_precision
            )
    return out


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def evaluate(
    dets: Sequence[Detection3D],
    gts: Sequence[GroundTruth3D],
    h: ClassHierarchy,
    cfg: EvalConfig | None = None,
) -> APReport:
    """AP for every fine class, threshold and LCA level, plus the aggregates.

    Per-class AP averages over thresholds; bucket and overall means average
    over classes that have at least one ground-truth box.
    """
    cfg = cfg or EvalConfig()
    if not gts:
        raise ValueError("cannot evaluate against an empty ground-truth set")
    check_classes(h, gts, "ground truth")
    check_classes(h, dets, "detections")

    num_gt = {c: 0 for c in h.fine_classes}
    for g in gts:
        num_gt[g.class_name] += 1
    counts = cfg.class_counts if cfg.class_counts is not None else num_gt
    for name in counts:
        if name not in h:
            raise UnknownClassError(name, "class in class_counts")
    bucket_of = bucket_classes(
        CardinalityBuckets(dict(counts), cfg.many_threshold, cfg.few_threshold), h.fine_classes
    )
    included = [c for c in h.fine_classes if num_gt[c] > 0]
    excluded = [c for c in h.fine_classes if num_gt[c] == 0]

    gts_by_frame = group_by_frame(gts)
    dets_by_class: dict[str, list] = {c: [] for c in h.fine_classes}
    for d in dets:
        dets_by_class[d.class_name].append(d)

    jobs = [
        (
            c,
            dets_by_class[c],
            gts_by_frame,
            {lca: ignore_set(h, c, lca) for lca in cfg.lca_levels},
            num_gt[c],
            cfg,
        )
        for c in included
    ]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_class_aps, jobs))
    else:
        results = [_class_aps(job) for job in jobs]

    per_class_threshold: dict[tuple[str, float, int], float] = {}
    per_class: dict[tuple[str, int], float] = {}
    for c, res in zip(included, results):
        for lca in cfg.lca_levels:
            vals = []
            for thr in cfg.thresholds:
                per_class_threshold[(c, thr, lca)] = res[(thr, lca)]
                vals.append(res[(thr, lca)])
            per_class[(c, lca)] = _mean(vals)

    buckets: dict[tuple[Bucket, int], float] = {}
    overall: dict[int, float] = {}
    for lca in cfg.lca_levels:
        if included:
            overall[lca] = _mean([per_class[(c, lca)] for c in included])
        for b in Bucket:
            members = [c for c in included if bucket_of[c] == b]
            if members:
                buckets[(b, lca)] = _mean([per_class[(c, lca)] for c in members])

    return APReport(
        per_class_threshold=per_class_threshold,
        per_class=per_class,
        buckets=buckets,
        overall=overall,
        num_gt=num_gt,
        bucket_of=bucket_of,
        excluded_classes=excluded,
        config=cfg,
    )


# -- confusion ---------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Row i, column j: fraction of matched class-i objects predicted as class j."""

    superclass: str
    classes: list[str]
    counts: np.ndarray
    rates: np.ndarray
    empty_rows: list[str]
    radius: float = CONFUSION_RADIUS


def confusion_matrix(
    dets: Sequence[Detection3D],
    gts: Sequence[GroundTruth3D],
    h: ClassHierarchy,
    superclass: str,
    radius: float = CONFUSION_RADIUS,
) -> ConfusionMatrix:
    """Misclassification rates among the fine classes of one superclass.

    Predictions of any class in the superclass are matched greedily (highest
    score first, nearest ground truth, each ground truth used once) against
    ground truth of any class in the superclass. Unmatched predictions are
    dropped.
    """
    if superclass not in h.coarse_classes:
        raise UnknownClassError(superclass, "superclass")
    classes = list(h.children(superclass))
    if len(classes) < 2:
        raise ValueError(f"superclass {superclass!r} has fewer than 2 fine classes")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    check_classes(h, gts, "ground truth")
    check_classes(h, dets, "detections")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)

    gts_by_frame = group_by_frame(g for g in gts if g.class_name in index)
    dets_by_frame = group_by_frame(d for d in dets if d.class_name in index)
    for frame_id in sorted(dets_by_frame):
        frame_gts = gts_by_frame.get(frame_id, [])
        taken: set[int] = set()
        for det in score_order(dets_by_frame[frame_id]):
            dx, dy = det.box.center[0], det.box.center[1]
            best = None
            best_dist = math.inf
            for g in frame_gts:
                if g.id in taken:
                    continue
                dist = math.hypot(dx - g.box.center[0], dy - g.box.center[1])
                if dist < radius and (dist < best_dist or (dist == best_dist and g.id < best.id)):
                    best, best_dist = g, dist
            if best is None:
                continue
            taken.add(best.id)
            counts[index[best.class_name], index[det.class_name]] += 1

    totals = counts.sum(axis=1)
    rates = np.zeros(counts.shape, dtype=float)
    nonzero = totals > 0
    rates[nonzero] = counts[nonzero] / totals[nonzero, None]
    empty = [c for c, t in zip(classes, totals) if t == 0]
    return ConfusionMatrix(superclass, classes, counts, rates, empty, radius)
