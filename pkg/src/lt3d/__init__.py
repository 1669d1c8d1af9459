"""Evaluation and late-fusion toolkit for long-tailed 3D object detection."""

__version__ = "0.1.0"

from .fusion import (
    Detection2D,
    FusionConfig,
    combine_scores,
    filter_by_rgb,
    filter_then_rescore,
    rescore_by_rgb2d,
)
from .geometry import (
    Box3D,
    CameraCalibration,
    Rect2D,
    bev_iou,
    ground_distance,
    project_box,
    rect_iou,
    within_class_nms,
)
from .hierarchy import (
    Bucket,
    CardinalityBuckets,
    ClassHierarchy,
    bucket_classes,
    lca_distance,
    load_hierarchy,
    siblings,
)
from .matching import Detection3D, GroundTruth3D, MatchVerdict, Verdict, match_class
from .metrics import APReport, ConfusionMatrix, EvalConfig, PRCurve, compute_ap, confusion_matrix, evaluate, pr_curve
from .synthetic import SyntheticSpec, generate_scene
