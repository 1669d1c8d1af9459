import random

import numpy as np
import pytest

from helpers import det, gt
from lt3d.hierarchy import Bucket, UnknownClassError
from lt3d.matching import MatchVerdict, Verdict, match_class
from lt3d.metrics import (
    EvalConfig,
    compute_ap,
    confusion_matrix,
    evaluate,
    interpolated_precision,
    pr_curve,
)
from oracles import reference_ap, reference_confusion


def seq(labels, start=1.0):
    """MatchVerdicts with strictly descending scores in the given order."""
    out = []
    gid = 0
    for k, lab in enumerate(labels):
        verdict = Verdict(lab)
        g = None
        if verdict == Verdict.TP:
            g, gid = gid, gid + 1
        out.append(MatchVerdict(k, verdict, start - k * 1e-3, g))
    return out


def test_perfect_and_empty():
    assert compute_ap(seq(["TP"] * 4), 4) == 1.0
    assert compute_ap(seq(["FP"] * 4), 4) == 0.0
    assert compute_ap([], 3) == 0.0
    with pytest.raises(ValueError):
        compute_ap(seq(["TP"]), 0)


def test_hand_sequence_against_oracle():
    labels = ["TP", "FP", "TP", "TP"]
    expected = reference_ap(labels, 3)
    assert compute_ap(seq(labels), 3) == pytest.approx(float(expected), abs=1e-12)
    # by hand: recall 1/3 at precision 1 (points 0..33), then 2/3 and 1 at precision 3/4
    hand = (34 * 1 + 67 * 0.75) / 101
    assert compute_ap(seq(labels), 3) == pytest.approx(hand, abs=1e-12)


def test_ignored_dropped():
    assert compute_ap(seq(["TP", "Ignored", "Ignored", "TP"]), 2) == 1.0


def test_random_sequences_against_oracle():
    rng = random.Random(1)
    for _ in range(300):
        n = rng.randint(0, 20)
        labels = [rng.choice(["TP", "FP", "Ignored"]) for _ in range(n)]
        num_gt = labels.count("TP") + rng.randint(0, 3) or 1
        assert compute_ap(seq(labels), num_gt) == pytest.approx(float(reference_ap(labels, num_gt)), abs=1e-12)


def test_pr_curve_invariants():
    rng = random.Random(2)
    for _ in range(100):
        labels = [rng.choice(["TP", "FP"]) for _ in range(15)]
        num_gt = labels.count("TP") + 2
        curve = pr_curve(seq(labels), num_gt)
        rec = curve.recall
        assert np.all(np.diff(rec) >= 0)
        assert np.all((curve.precision >= 0) & (curve.precision <= 1))
        assert [round(r * num_gt) for r in rec] == list(curve.tp_counts)
        interp = interpolated_precision(curve)
        assert all(a >= b for a, b in zip(interp, interp[1:]))


def test_too_many_tps_rejected():
    with pytest.raises(ValueError):
        pr_curve(seq(["TP", "TP"]), 1)


def test_scale_invariance():
    rng = random.Random(3)
    for _ in range(100):
        labels = [rng.choice(["TP", "FP", "Ignored"]) for _ in range(12)]
        scores = [rng.random() for _ in labels]
        vs = [MatchVerdict(i, Verdict(l), s, i if l == "TP" else None) for i, (l, s) in enumerate(zip(labels, scores))]
        num_gt = labels.count("TP") + 1
        base = compute_ap(vs, num_gt)
        for factor in (0.5, 0.1, 1e-3):
            scaled = [MatchVerdict(v.detection_id, v.verdict, v.score * factor, v.matched_gt_id) for v in vs]
            assert compute_ap(scaled, num_gt) == base


def test_trailing_fps_never_increase_ap():
    rng = random.Random(4)
    for _ in range(100):
        labels = [rng.choice(["TP", "FP"]) for _ in range(10)]
        num_gt = labels.count("TP") + 1
        vs = seq(labels)
        base = compute_ap(vs, num_gt)
        low = min(v.score for v in vs)
        extra = [MatchVerdict(100 + k, Verdict.FP, low * 0.5 ** (k + 1)) for k in range(rng.randint(1, 5))]
        assert compute_ap(vs + extra, num_gt) <= base


def test_trapezoid_and_clipping():
    vs = seq(["TP", "FP", "TP", "TP"])
    trap = compute_ap(vs, 3, "trapezoid")
    # envelope: precision 1 up to recall 1/3, then 3/4; the FP repeats recall 1/3 so the drop is a step
    assert trap == pytest.approx(1 / 3 + (2 / 3) * 0.75, abs=1e-12)
    assert compute_ap(seq(["TP"] * 3), 3, "trapezoid") == pytest.approx(1.0)
    clipped = compute_ap(vs, 3, min_recall=0.1, min_precision=0.1)
    interp = [1.0] * 34 + [0.75] * 67
    expected = sum((p - 0.1) / 0.9 for p in interp[11:]) / 90
    assert clipped == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        compute_ap(vs, 3, "11-point")
    with pytest.raises(ValueError):
        compute_ap(vs, 3, min_recall=1.0)


def test_default_config():
    cfg = EvalConfig()
    assert cfg.thresholds == (0.5, 1.0, 2.0, 4.0)
    assert cfg.lca_levels == (0, 1, 2)
    assert cfg.interpolation == "101-point"
    assert cfg.min_recall == 0.0 and cfg.min_precision == 0.0
    for bad in (dict(thresholds=()), dict(thresholds=(0.0,)), dict(lca_levels=(3,)), dict(workers=0),
                dict(interpolation="x")):
        with pytest.raises(ValueError):
            EvalConfig(**bad)


def test_evaluate_perfect(nuscenes):
    gts = [gt(i, c, 5.0 * i, 0) for i, c in enumerate(["car", "car", "adult", "barrier"])]
    dets = [det(g.id, g.class_name, g.box.center[0], 0, 1.0) for g in gts]
    rep = evaluate(dets, gts, nuscenes)
    assert rep.overall == {0: 1.0, 1: 1.0, 2: 1.0}
    assert all(v == 1.0 for v in rep.per_class_threshold.values())
    assert set(rep.classes) == {"car", "adult", "barrier"}
    assert "child" in rep.excluded_classes
    assert ("child", 0) not in rep.per_class


def test_evaluate_errors(nuscenes):
    with pytest.raises(ValueError):
        evaluate([det(0, "car", 0, 0, 1.0)], [], nuscenes)
    with pytest.raises(UnknownClassError):
        evaluate([det(0, "unicorn", 0, 0, 1.0)], [gt(0, "car", 0, 0)], nuscenes)
    with pytest.raises(UnknownClassError):
        evaluate([], [gt(0, "car", 0, 0)], nuscenes, EvalConfig(class_counts={"lamp": 4}))


def random_scene(rng, n_frames=3, classes=("car", "truck", "adult", "child", "barrier")):
    dets, gts = [], []
    for f in range(n_frames):
        frame = f"f{f}"
        for _ in range(rng.randint(1, 8)):
            gts.append(gt(len(gts), rng.choice(classes), rng.uniform(0, 10), rng.uniform(0, 10), frame))
        for _ in range(rng.randint(0, 10)):
            dets.append(det(len(dets), rng.choice(classes), rng.uniform(0, 10), rng.uniform(0, 10),
                            round(rng.random(), 2), frame))
    return dets, gts


def test_aggregates_are_means(nuscenes):
    rng = random.Random(5)
    dets, gts = random_scene(rng, 6)
    cfg = EvalConfig(class_counts={"car": 60_000, "truck": 20_000})
    rep = evaluate(dets, gts, nuscenes, cfg)
    assert rep.bucket_of["car"] == Bucket.MANY and rep.bucket_of["truck"] == Bucket.MEDIUM
    assert rep.bucket_of["adult"] == Bucket.FEW
    for lca in (0, 1, 2):
        for c in rep.classes:
            vals = [rep.per_class_threshold[(c, t, lca)] for t in cfg.thresholds]
            assert rep.per_class[(c, lca)] == pytest.approx(sum(vals) / 4, abs=1e-15)
        assert rep.overall[lca] == pytest.approx(np.mean([rep.per_class[(c, lca)] for c in rep.classes]), abs=1e-15)
        for b in Bucket:
            members = [c for c in rep.classes if rep.bucket_of[c] == b]
            if members:
                assert rep.buckets[(b, lca)] == pytest.approx(np.mean([rep.per_class[(c, lca)] for c in members]))


def test_evaluate_matches_per_class_recomputation(nuscenes):
    rng = random.Random(6)
    for _ in range(10):
        dets, gts = random_scene(rng)
        rep = evaluate(dets, gts, nuscenes)
        for (c, thr, lca), ap in rep.per_class_threshold.items():
            mine = [d for d in dets if d.class_name == c]
            vs = match_class(mine, gts, nuscenes, thr, lca, class_name=c)
            assert ap == compute_ap(vs, sum(g.class_name == c for g in gts))


def test_lca_monotone_on_random_scenes(nuscenes):
    rng = random.Random(7)
    for _ in range(30):
        dets, gts = random_scene(rng)
        rep = evaluate(dets, gts, nuscenes)
        for (c, thr, lca), ap in rep.per_class_threshold.items():
            if lca < 2:
                assert ap <= rep.per_class_threshold[(c, thr, lca + 1)]


def test_workers_bit_identical(nuscenes):
    rng = random.Random(8)
    dets, gts = random_scene(rng, 5)
    a = evaluate(dets, gts, nuscenes, EvalConfig(workers=1))
    b = evaluate(dets, gts, nuscenes, EvalConfig(workers=2))
    assert a.per_class_threshold == b.per_class_threshold
    assert a.overall == b.overall and a.buckets == b.buckets


def test_confusion_identity(nuscenes):
    gts = [gt(0, "adult", 0, 0), gt(1, "child", 5, 0), gt(2, "car", 10, 0)]
    dets = [det(0, "adult", 0.1, 0, 0.9), det(1, "child", 5.1, 0, 0.8), det(2, "car", 10, 0, 0.9)]
    cm = confusion_matrix(dets, gts, nuscenes, "pedestrian")
    i, j = cm.classes.index("adult"), cm.classes.index("child")
    assert cm.rates[i, i] == 1.0 and cm.rates[j, j] == 1.0
    assert "stroller" in cm.empty_rows
    assert cm.rates[cm.classes.index("stroller")].sum() == 0.0


def test_confusion_child_as_adult(nuscenes):
    gts = [gt(0, "child", 0, 0), gt(1, "child", 5, 0)]
    dets = [det(0, "adult", 0.2, 0, 0.9), det(1, "adult", 5.2, 0, 0.7), det(2, "adult", 30, 0, 0.6)]
    cm = confusion_matrix(dets, gts, nuscenes, "pedestrian")
    row = cm.rates[cm.classes.index("child")]
    assert row[cm.classes.index("adult")] == 1.0
    assert row.sum() == 1.0
    assert cm.counts.sum() == 2  # the far prediction is dropped


def test_confusion_errors(nuscenes):
    with pytest.raises(UnknownClassError):
        confusion_matrix([], [], nuscenes, "animal")
    with pytest.raises(UnknownClassError):
        confusion_matrix([], [], nuscenes, "car")


def test_confusion_against_oracle(nuscenes):
    rng = random.Random(9)
    classes = list(nuscenes.children("vehicle"))
    for _ in range(50):
        dets, gts = random_scene(rng, 2, classes=tuple(classes[:4]) + ("adult",))
        cm = confusion_matrix(dets, gts, nuscenes, "vehicle")
        counts, rates = reference_confusion(dets, gts, cm.classes, 2.0)
        assert cm.counts.tolist() == counts
        assert np.allclose(cm.rates, rates, atol=1e-12, rtol=0)
        sums = cm.rates.sum(axis=1)
        for s, c in zip(sums, cm.classes):
            assert (abs(s - 1) <= 1e-9) or (s == 0 and c in cm.empty_rows)
