"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that conftest prints in the terminal
summary, so ``pytest tests/test_acceptance.py`` gives a one-screen verdict.
"""
import contextlib
import hashlib
import json
import math
import random
import time

import numpy as np

from helpers import ACCEPTANCE_RESULTS, det, gt
from lt3d.cli import main
from lt3d.fusion import FusionConfig, combine_all, combine_scores, filter_by_rgb, rescore_with_stats
from lt3d.geometry import Box3D, CameraCalibration, project_box
from lt3d.matching import MatchVerdict, Verdict, match_class
from lt3d.metrics import compute_ap, confusion_matrix, evaluate
from lt3d.synthetic import SyntheticSpec, generate_scene
from oracles import pinhole_hull, reference_ap, reference_confusion, reference_match


@contextlib.contextmanager
def criterion(num, title, budget):
    """Run the body, enforce the time budget, record the outcome."""
    state = {"detail": ""}
    start = time.perf_counter()
    try:
        yield state
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
    except BaseException as exc:
        msg = str(exc).strip().split("\n")[0] or type(exc).__name__
        ACCEPTANCE_RESULTS[num] = (title, False, msg[:200])
        raise
    ACCEPTANCE_RESULTS[num] = (title, True, f"{state['detail']} ({elapsed:.1f}s)".strip())


def random_spec(rng, seed, **over):
    spec = dict(
        seed=seed,
        num_frames=rng.randint(1, 3),
        class_distribution={c: rng.uniform(0.5, 3) for c in rng.sample(
            ["car", "truck", "bus", "adult", "child", "stroller", "barrier", "traffic-cone"], 4)},
        localization_noise_sigma=rng.uniform(0, 1.5),
        sibling_confusion_rate=rng.uniform(0, 0.6),
        fp_rate_per_frame=rng.uniform(0, 4),
        extent=rng.choice([10.0, 25.0]),
    )
    spec.update(over)
    return SyntheticSpec(**spec)


def test_criterion_01_lca_monotonicity(nuscenes):
    with criterion(1, "AP_H monotone across LCA levels on random scenes", 60) as st:
        rng = random.Random(101)
        checked = 0
        for seed in range(120):
            scene = generate_scene(random_spec(rng, seed))
            if not scene.groundtruth:
                continue
            rep = evaluate(scene.detections, scene.groundtruth, nuscenes)
            for c in rep.classes:
                for thr in rep.config.thresholds:
                    a0, a1, a2 = (rep.per_class_threshold[(c, thr, l)] for l in (0, 1, 2))
                    assert a0 <= a1 <= a2, f"{c} @ {thr} m: {a0}, {a1}, {a2}"
                assert rep.per_class[(c, 0)] <= rep.per_class[(c, 1)] <= rep.per_class[(c, 2)]
                checked += 1
        assert checked >= 100
        st["detail"] = f"{checked} class/scene cases"


def ledger_labels(scene, cls, lca_level):
    """Verdict labels for ``cls`` derived only from the generator ledger.

    With zero noise and separated objects, a detection sits exactly on its
    source GT and on nothing else, so its verdict follows from provenance.
    """
    by_id = {d.id: d for d in scene.detections}
    rows = []
    for e in scene.ledger:
        if e.detected_class != cls:
            continue
        if e.true_class == cls:
            lab = "TP"
        else:
            lab = "Ignored" if lca_level >= 1 else "FP"
        d = by_id[e.detection_id]
        rows.append((-d.score, d.id, lab))
    return [lab for _, _, lab in sorted(rows)]


def test_criterion_02_sibling_confusion_recovery(nuscenes):
    with criterion(2, "sibling confusion: AP_H(LCA=1) = 1.0 and LCA=0 matches oracle", 60) as st:
        observed = {}
        for p in (0.25, 0.5, 0.75):
            spec = SyntheticSpec(seed=int(p * 100), num_frames=40, sibling_confusion_rate=p,
                                 localization_noise_sigma=0.0, fp_rate_per_frame=0.0, min_separation=5.0,
                                 extent=60.0, class_distribution={"adult": 3, "child": 3, "car": 3, "truck": 2})
            scene = generate_scene(spec)
            rep = evaluate(scene.detections, scene.groundtruth, nuscenes)
            affected = sorted({e.true_class for e in scene.ledger if e.flipped}
                              | {e.detected_class for e in scene.ledger if e.flipped})
            affected = [c for c in affected if c in rep.classes]
            assert affected
            for c in affected:
                num_gt = rep.num_gt[c]
                for lca in (0, 1):
                    oracle = float(reference_ap(ledger_labels(scene, c, lca), num_gt))
                    got = rep.per_class[(c, lca)]
                    assert abs(got - oracle) <= 1e-9, f"p={p} {c} LCA={lca}: {got} vs oracle {oracle}"
                observed[(p, c)] = rep.per_class[(c, 1)]
        worst = min(observed, key=observed.get)
        # the stated target; flipped GTs of a class are never recalled, so this cannot hold for p > 0
        for (p, c), ap in sorted(observed.items()):
            assert ap == 1.0, (f"AP_H(LCA=1) for {c} at p={p} is {ap:.4f}, not 1.0 "
                               f"(oracle agrees; worst {worst[1]} at p={worst[0]}: {observed[worst]:.4f})")
        st["detail"] = f"{len(observed)} class/rate cases"


def test_criterion_03_matching_oracle(nuscenes):
    with criterion(3, "match_class equals exhaustive reference matcher on 1000 frames", 120) as st:
        rng = random.Random(303)
        classes = ["car", "truck", "adult", "child", "stroller", "barrier"]
        parent = dict(nuscenes.parent)
        compared = 0
        for f in range(1000):
            frame = f"f{f}"
            dets = [det(i, rng.choice(classes), rng.uniform(0, 8), rng.uniform(0, 8),
                        round(rng.random(), rng.choice([1, 3])), frame) for i in range(rng.randint(0, 20))]
            gts = [gt(i, rng.choice(classes), rng.uniform(0, 8), rng.uniform(0, 8), frame)
                   for i in range(rng.randint(0, 15))]
            thr = rng.choice([0.5, 1.0, 2.0, 4.0])
            for cls in {d.class_name for d in dets}:
                mine = [d for d in dets if d.class_name == cls]
                for lca in (0, 1, 2):
                    out = match_class(mine, gts, nuscenes, thr, lca, class_name=cls)
                    got = {v.detection_id: (v.verdict.value, v.matched_gt_id) for v in out}
                    assert got == reference_match(dets, gts, parent, cls, thr, lca), f"frame {f} {cls} LCA={lca}"
                    compared += len(got)
        st["detail"] = f"{compared} verdicts"


def test_criterion_04_ap_oracle():
    with criterion(4, "compute_ap equals 101-point enumeration oracle on 500 sequences", 30) as st:
        rng = random.Random(404)
        worst = 0.0
        for _ in range(500):
            n = rng.randint(0, 40)
            labels = [rng.choices(["TP", "FP", "Ignored"], [3, 2, 1])[0] for _ in range(n)]
            num_gt = labels.count("TP") + rng.randint(0, 5) or 1
            vs, gid = [], 0
            for k, lab in enumerate(labels):
                g = None
                if lab == "TP":
                    g, gid = gid, gid + 1
                vs.append(MatchVerdict(k, Verdict(lab), 1.0 - k / 1000, g))
            err = abs(compute_ap(vs, num_gt) - float(reference_ap(labels, num_gt)))
            worst = max(worst, err)
            assert err <= 1e-12
        st["detail"] = f"max error {worst:.1e}"


def test_criterion_05_filter_subset_idempotent():
    with criterion(5, "filter output is a subset and filtering is idempotent", 30) as st:
        rng = random.Random(505)
        total = 0
        for seed in range(200):
            scene = generate_scene(random_spec(rng, seed, num_cameras=0, rgb_localization_sigma=rng.uniform(0, 5)))
            cfg = FusionConfig(filter_radius=rng.choice([0.5, 2.0, 4.0]), filter_class_aware=rng.random() < 0.7)
            once = filter_by_rgb(scene.detections, scene.rgb_detections, cfg)
            ids = [d.id for d in scene.detections]
            kept = [d.id for d in once]
            assert set(kept) <= set(ids)
            assert kept == [i for i in ids if i in set(kept)]
            assert all(a == b for a, b in zip(once, (d for d in scene.detections if d.id in set(kept))))
            assert filter_by_rgb(once, scene.rgb_detections, cfg) == once
            total += len(once)
        st["detail"] = f"{total} detections kept across 200 scenes"


def test_criterion_06_rescore_multiplier():
    with criterion(6, "fully matched scene: every score becomes min(1, 1.25 x original)", 10) as st:
        scene = generate_scene(SyntheticSpec(seed=606, num_frames=10, rgb_recall=1.0, rgb_pixel_sigma=0.0,
                                             class_distribution={"car": 6, "adult": 4, "barrier": 3}))
        visible = [d for d in scene.detections
                   if any(c.frame_id == d.frame_id and project_box(d.box, c) for c in scene.calibrations)]
        assert len(visible) > 50
        out, stats = rescore_with_stats(visible, scene.rgb_detections_2d, scene.calibrations,
                                        FusionConfig(rescore_match_multiplier=1.25))
        assert stats.matched == len(visible) and stats.unmatched == 0
        for a, b in zip(visible, out):
            assert abs(b.score - min(1.0, 1.25 * a.score)) <= 1e-12
        st["detail"] = f"{len(visible)} detections, {stats.clamped} clamped"


def test_criterion_07_confusion_properties(nuscenes):
    with criterion(7, "confusion rows stochastic, identity when perfect, equal to pairing oracle", 30) as st:
        rng = random.Random(707)
        supers = [s for s in nuscenes.coarse_classes if len(nuscenes.children(s)) >= 2]
        worst = 0.0
        for seed in range(100):
            scene = generate_scene(random_spec(rng, seed, num_cameras=0))
            for s in supers:
                cm = confusion_matrix(scene.detections, scene.groundtruth, nuscenes, s)
                counts, rates = reference_confusion(scene.detections, scene.groundtruth, cm.classes, 2.0)
                assert cm.counts.tolist() == counts
                worst = max(worst, float(np.max(np.abs(cm.rates - np.array(rates)))))
                assert worst <= 1e-12
                for name, row in zip(cm.classes, cm.rates):
                    if name in cm.empty_rows:
                        assert not row.any()
                    else:
                        assert abs(row.sum() - 1.0) <= 1e-9
                        assert ((row >= 0) & (row <= 1)).all()
        for seed in range(20):
            perfect = generate_scene(random_spec(rng, 1000 + seed, num_cameras=0, localization_noise_sigma=0.0,
                                                 sibling_confusion_rate=0.0, fp_rate_per_frame=0.0))
            for s in supers:
                cm = confusion_matrix(perfect.detections, perfect.groundtruth, nuscenes, s)
                for i, name in enumerate(cm.classes):
                    if name not in cm.empty_rows:
                        assert cm.rates[i, i] == 1.0 and cm.rates[i].sum() == 1.0
        st["detail"] = f"max deviation {worst:.1e}"


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_criterion_08_projection_oracle():
    with criterion(8, "project_box equals per-corner pinhole oracle; behind-camera is absent", 10) as st:
        rng = np.random.default_rng(808)
        worst = 0.0
        present = 0
        for _ in range(500):
            f = rng.uniform(300, 1500)
            w, h = int(rng.integers(320, 1920)), int(rng.integers(240, 1080))
            K = np.array([[f, 0, w / 2 + rng.uniform(-20, 20)], [0, f * rng.uniform(0.9, 1.1), h / 2], [0, 0, 1]])
            R = random_rotation(rng)
            t = rng.uniform(-3, 3, size=3)
            cal = CameraCalibration("c", K, R, t, (w, h))
            # place most boxes in front of the camera so the comparison is not vacuous
            cam_point = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 40)])
            center = R.T @ (cam_point - t)
            box = Box3D(tuple(center), tuple(rng.uniform(0.3, 6, size=3)), float(rng.uniform(-math.pi, math.pi)))
            got = project_box(box, cal)
            want = pinhole_hull(box.center, box.size, box.yaw, K.tolist(), R.tolist(), t.tolist(), w, h)
            assert (got is None) == (want is None)
            if got is not None:
                present += 1
                worst = max(worst, max(abs(a - b) for a, b in zip(got.as_list(), want)))
                assert worst <= 1e-6
        assert present > 200
        for _ in range(100):
            R = random_rotation(rng)
            t = rng.uniform(-3, 3, size=3)
            cal = CameraCalibration("c", np.array([[800.0, 0, 640], [0, 800, 360], [0, 0, 1]]), R, t, (1280, 720))
            size = rng.uniform(0.3, 3, size=3)
            depth = rng.uniform(-50, -np.linalg.norm(size) - 0.1)
            center = R.T @ (np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), depth]) - t)
            assert project_box(Box3D(tuple(center), tuple(size), float(rng.uniform(-3, 3))), cal) is None
        st["detail"] = f"{present} visible pairs, max error {worst:.1e} px"


def pipeline(root, spec_path):
    scene = root / "scene"
    assert main(["generate", "--spec", str(spec_path), "--output-dir", str(scene)]) == 0
    fused = root / "fused.json"
    assert main(["fuse", "--lidar", str(scene / "detections.json"), "--rgb3d", str(scene / "rgb_detections.json"),
                 "--rgb2d", str(scene / "rgb_detections_2d.json"), "--calibrations", str(scene / "calibrations.json"),
                 "--output", str(fused)]) == 0
    report = root / "report.json"
    assert main(["eval", "--gt", str(scene / "groundtruth.json"), "--det", str(fused), "--report", str(report)]) == 0
    cm = root / "confusion.json"
    assert main(["confusion", "--gt", str(scene / "groundtruth.json"), "--det", str(fused),
                 "--superclass", "vehicle", "--output", str(cm)]) == 0
    primary = sorted(p for p in root.rglob("*") if p.is_file() and not p.name.endswith(".manifest.json"))
    digests = {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in primary}
    # manifests differ only in paths and wall-clock time; their recorded digests must agree
    for m in sorted(root.rglob("*.manifest.json")):
        doc = json.loads(m.read_text())
        for section in ("inputs", "outputs"):
            for name, entry in doc[section].items():
                digests[f"{m.name}:{section}:{name}"] = entry["sha256"]
    return digests


def test_criterion_09_determinism(tmp_path):
    with criterion(9, "two CLI pipeline runs give byte-identical outputs", 60) as st:
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({
            "seed": 909, "num_frames": 8, "localization_noise_sigma": 0.4, "sibling_confusion_rate": 0.25,
            "fp_rate_per_frame": 3, "class_distribution": {"car": 5, "truck": 2, "bus": 1, "adult": 3, "child": 1},
        }))
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        a = pipeline(tmp_path / "a", spec_path)
        b = pipeline(tmp_path / "b", spec_path)
        assert len(a) >= 10
        assert a == b
        st["detail"] = f"{len(a)} output files"


def test_criterion_10_score_combination(nuscenes):
    with criterion(10, "score-combination variants follow their products; fine-only is rank neutral", 30) as st:
        d = det(0, "car", 0, 0, 0.8, object=0.5, coarse=0.5)
        assert abs(combine_scores(d, "object-times-fine").score - 0.4) <= 1e-12
        rng = random.Random(1010)
        for _ in range(1000):
            fine, obj, coarse = rng.random(), rng.random(), rng.random()
            d = det(0, "car", 0, 0, fine, object=obj, coarse=coarse)
            assert abs(combine_scores(d, "fine-only").score - fine) <= 1e-12
            assert abs(combine_scores(d, "object-times-fine").score - obj * fine) <= 1e-12
            assert abs(combine_scores(d, "coarse-times-fine").score - coarse * fine) <= 1e-12
            assert abs(combine_scores(d, "object-times-coarse-times-fine").score - obj * coarse * fine) <= 1e-12
        for seed in range(10):
            scene = generate_scene(random_spec(rng, seed, num_cameras=0))
            if not scene.groundtruth:
                continue
            raw = evaluate(scene.detections, scene.groundtruth, nuscenes)
            fine_only = evaluate(combine_all(scene.detections, "fine-only"), scene.groundtruth, nuscenes)
            assert raw.per_class_threshold == fine_only.per_class_threshold
            assert raw.overall == fine_only.overall
        st["detail"] = "4 variants, 1000 random triples"
