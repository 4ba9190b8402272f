import math
import random

import numpy as np
import pytest

from panobox.metrics import (
    COCO_IOU_THRESHOLDS,
    Detection,
    GoldScore,
    coco_map,
    gold_score,
    recall_at_k,
    weighted_fscore,
)
from panobox.model import BBox, BoxSet, Stage


def _box(cls, x0, y0, x1, y1, link=None):
    return BBox(cls, x0, y0, x1, y1, link_id=link)


def _set(pid, *boxes):
    return BoxSet(pid, 1400, 700, tuple(boxes), stage=Stage.GOLD)


def _det(pid, cls, x0, y0, x1, y1, score):
    return Detection(pid, cls, _box(cls, x0, y0, x1, y1), score)


# ---------------------------------------------------------------------------
# weighted F-score


def test_weighted_fscore_perfect():
    labels = {"a": {"tree"}, "b": {"tree", "bus"}}
    out = weighted_fscore(labels, labels, ["tree", "bus"])
    assert out["weighted_f"] == 1.0
    assert all(v["f"] == 1.0 for v in out["per_class"].values())


def test_weighted_fscore_harmonic_mean_of_equals():
    # tree: precision 0.5 (1 TP, 1 FP), recall 0.5 (1 TP, 1 FN) -> F = 0.5
    pred = {"a": {"tree"}, "b": {"tree"}, "c": set(), "d": set()}
    true = {"a": {"tree"}, "b": set(), "c": {"tree"}, "d": set()}
    out = weighted_fscore(pred, true, ["tree"])
    assert out["per_class"]["tree"]["f"] == 0.5


def test_weighted_fscore_support_weighting():
    # class a: support 3, f1; class b: support 1, f2 -> (3 f1 + f2) / 4
    pred = {
        "i1": {"a"}, "i2": {"a"}, "i3": set(), "i4": {"b"}, "i5": {"b"},
    }
    true = {
        "i1": {"a"}, "i2": {"a"}, "i3": {"a"}, "i4": {"b"}, "i5": set(),
    }
    out = weighted_fscore(pred, true, ["a", "b"])
    f_a = out["per_class"]["a"]["f"]
    f_b = out["per_class"]["b"]["f"]
    assert out["per_class"]["a"]["support"] == 3
    assert out["per_class"]["b"]["support"] == 1
    assert out["weighted_f"] == pytest.approx((3 * f_a + 1 * f_b) / 4)


def test_weighted_fscore_matches_sklearn():
    from sklearn.metrics import f1_score

    rng = random.Random(8)
    classes = ["a", "b", "c", "d"]
    images = [f"i{k}" for k in range(40)]
    pred = {i: {c for c in classes if rng.random() < 0.4} for i in images}
    true = {i: {c for c in classes if rng.random() < 0.4} for i in images}
    ours = weighted_fscore(pred, true, classes)
    y_true = np.array([[c in true[i] for c in classes] for i in images], dtype=int)
    y_pred = np.array([[c in pred[i] for c in classes] for i in images], dtype=int)
    ref = f1_score(y_true, y_pred, average="weighted", zero_division=0)
    assert ours["weighted_f"] == pytest.approx(ref, abs=1e-12)
    per = f1_score(y_true, y_pred, average=None, zero_division=0)
    for c, f_ref in zip(classes, per):
        assert ours["per_class"][c]["f"] == pytest.approx(f_ref, abs=1e-12)


def test_weighted_fscore_rejects_mismatched_images():
    with pytest.raises(ValueError):
        weighted_fscore({"a": set()}, {"b": set()}, ["x"])


# ---------------------------------------------------------------------------
# COCO mAP


def test_coco_map_single_perfect_detection():
    truth = {"a": _set("a", _box("tree", 0, 0, 10, 10))}
    dets = [_det("a", "tree", 0, 0, 10, 10, 0.9)]
    out = coco_map(dets, truth)
    assert out["map"] == 1.0
    assert out["map50"] == 1.0


def test_coco_map_threshold_semantics():
    # detection with IoU 0.6: TP at 0.5, FP at 0.75
    truth = {"a": _set("a", _box("tree", 0, 0, 10, 10))}
    dets = [_det("a", "tree", 0, 4, 10, 14, 0.9)]  # IoU = 6/14 ≈ 0.43
    dets2 = [_det("a", "tree", 0, 2.5, 10, 12.5, 0.9)]  # IoU = 7.5/12.5 = 0.6
    out = coco_map(dets2, truth)
    per_thr = out["per_class_per_threshold"]["tree"]
    assert per_thr[0.5] == 1.0
    assert per_thr[0.6] == 1.0
    assert per_thr[0.75] == 0.0
    assert coco_map(dets, truth)["map50"] == 0.0


def test_coco_map_hand_traced_pr_curve():
    # 3 detections, 2 truths; at thr .5: [TP, TP, FP] -> AP = 1.0
    # at thr .65 the second detection turns FP -> AP = 51/101
    truth = {"a": _set("a", _box("tree", 0, 0, 10, 10), _box("tree", 20, 20, 30, 30))}
    dets = [
        _det("a", "tree", 0, 0, 10, 10, 0.9),          # IoU 1.0 with t1
        _det("a", "tree", 20, 20, 26, 30, 0.8),        # IoU 0.6 with t2
        _det("a", "tree", 40, 40, 50, 50, 0.7),        # IoU 0, FP
    ]
    out = coco_map(dets, truth, iou_thresholds=(0.5, 0.65))
    per_thr = out["per_class_per_threshold"]["tree"]
    assert per_thr[0.5] == pytest.approx(1.0)
    assert per_thr[0.65] == pytest.approx(51 / 101)
    assert out["map"] == pytest.approx((1.0 + 51 / 101) / 2)


def _brute_force_ap(dets, truths, thr):
    """Independent naive AP: explicit greedy trace then 101-pt interpolation."""
    from panobox.noise import iou as iou_fn

    order = sorted(
        range(len(dets)),
        key=lambda k: (-dets[k].score, dets[k].image_id, dets[k].box.x_min,
                       dets[k].box.y_min, dets[k].box.x_max, dets[k].box.y_max),
    )
    used = set()
    points = []
    tp = fp = 0
    n_truth = len(truths)
    for k in order:
        det = dets[k]
        cands = [
            (iou_fn(det.box, t), j)
            for j, (pid, t) in enumerate(truths)
            if pid == det.image_id and j not in used
        ]
        cands = [(v, j) for v, j in cands if v >= thr]
        if cands:
            v, j = max(cands, key=lambda q: (q[0], -q[1]))
            used.add(j)
            tp += 1
        else:
            fp += 1
        points.append((tp / n_truth, tp / (tp + fp)))
    ap = 0.0
    for r in [i / 100 for i in range(101)]:
        best = 0.0
        for rec, prec in points:
            if rec >= r - 1e-12:
                best = max(best, prec)
        ap += best / 101
    return ap


def test_coco_map_equals_brute_force_on_small_instances():
    rng = random.Random(12)
    for _ in range(100):
        truths = []
        boxes = []
        for j in range(rng.randint(1, 3)):
            x0, y0 = rng.uniform(0, 80), rng.uniform(0, 80)
            b = _box("tree", x0, y0, x0 + rng.uniform(4, 20), y0 + rng.uniform(4, 20))
            truths.append(("a", b))
            boxes.append(b)
        dets = []
        for k in range(rng.randint(0, 5)):
            if boxes and rng.random() < 0.7:
                base = rng.choice(boxes)
                dx, dy = rng.uniform(-6, 6), rng.uniform(-6, 6)
                db = _box("tree", base.x_min + dx, base.y_min + dy,
                          base.x_max + dx, base.y_max + dy)
            else:
                x0, y0 = rng.uniform(0, 80), rng.uniform(0, 80)
                db = _box("tree", x0, y0, x0 + 10, y0 + 10)
            dets.append(Detection("a", "tree", db, round(rng.random(), 3)))
        truth_map = {"a": _set("a", *[t for _, t in truths])}
        for thr in (0.5, 0.75):
            ours = coco_map(dets, truth_map, iou_thresholds=(thr,))["map"]
            ref = _brute_force_ap(dets, truths, thr)
            assert ours == pytest.approx(ref, abs=1e-12)


def test_coco_map_monotone_in_threshold():
    rng = random.Random(13)
    for _ in range(30):
        truth = {}
        dets = []
        for pid in ("a", "b"):
            boxes = []
            for _ in range(rng.randint(1, 4)):
                x0, y0 = rng.uniform(0, 100), rng.uniform(0, 100)
                boxes.append(_box("tree", x0, y0, x0 + rng.uniform(5, 25), y0 + rng.uniform(5, 25)))
            truth[pid] = _set(pid, *boxes)
            for b in boxes:
                if rng.random() < 0.8:
                    dx = rng.uniform(-4, 4)
                    dets.append(
                        Detection(pid, "tree",
                                  _box("tree", b.x_min + dx, b.y_min, b.x_max + dx, b.y_max),
                                  round(rng.random(), 3))
                    )
        out = coco_map(dets, truth)
        per_thr = out["per_class_per_threshold"]["tree"]
        aps = [per_thr[t] for t in COCO_IOU_THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


# ---------------------------------------------------------------------------
# recall@k


def test_recall_at_k_all_matched():
    truth = {"a": _set("a", _box("tree", 0, 0, 10, 10))}
    dets = [_det("a", "tree", 0, 0, 10, 10, 0.9)]
    assert recall_at_k(dets, truth, k=100) == 1.0


def test_recall_at_k_no_detections():
    truth = {"a": _set("a", _box("tree", 0, 0, 10, 10))}
    assert recall_at_k([], truth, k=100) == 0.0


def test_recall_at_k_rank_cutoff():
    # 120 detections; only ranks 101-120 hit the truths -> recall 0
    truth = {"a": _set("a", *[_box("tree", 1000 + 12 * j, 0, 1010 + 12 * j, 10) for j in range(20)])}
    dets = []
    for k in range(100):  # high-scoring misses
        dets.append(_det("a", "tree", k, 100, k + 5, 110, 0.9))
    for j in range(20):   # low-scoring hits
        dets.append(_det("a", "tree", 1000 + 12 * j, 0, 1010 + 12 * j, 10, 0.1))
    assert recall_at_k(dets, truth, k=100) == 0.0
    assert recall_at_k(dets, truth, k=120) == 1.0


# ---------------------------------------------------------------------------
# gold scoring


def test_gold_score_identical_sets():
    gold = _set("p", _box("tree", 0, 0, 10, 10), _box("bus", 50, 50, 90, 90))
    out = gold_score(gold, gold)
    assert out.median_iou == 1.0
    assert out.passed


def test_gold_score_empty_worker_fails():
    gold = _set("p", _box("tree", 0, 0, 10, 10))
    worker = _set("p")
    out = gold_score(worker, gold)
    assert out.median_iou == 0.0
    assert not out.passed


def test_gold_score_median_includes_missed_gold():
    gold = _set(
        "p",
        _box("tree", 0, 0, 10, 10),
        _box("tree", 100, 100, 110, 110),
        _box("tree", 200, 200, 210, 210),
    )
    # matches at IoU 0.8 and 0.6 may vary in construction; use exact overlaps:
    # worker matches two gold boxes with IoU {0.8, 0.6}, misses the third
    w1 = _box("tree", 0, 0, 10, 8)       # IoU 0.8 with gold 1
    w2 = _box("tree", 100, 100, 110, 106)  # IoU 0.6 with gold 2
    worker = _set("p", w1, w2)
    out = gold_score(worker, gold)
    assert sorted(out.samples) == pytest.approx([0.0, 0.6, 0.8])
    assert out.median_iou == pytest.approx(0.6)
    assert out.passed


def test_gold_score_threshold():
    gold = _set("p", _box("tree", 0, 0, 10, 10))
    worker = _set("p", _box("tree", 0, 0, 10, 3))  # IoU 0.3
    assert not gold_score(worker, gold, pass_threshold=0.4).passed
    assert gold_score(worker, gold, pass_threshold=0.25).passed


def test_gold_score_empty_gold_is_error():
    with pytest.raises(ValueError):
        gold_score(_set("p"), _set("p"))


def test_gold_score_class_restricted():
    gold = _set("p", _box("tree", 0, 0, 10, 10))
    worker = _set("p", _box("bus", 0, 0, 10, 10))  # right place, wrong class
    out = gold_score(worker, gold)
    assert out.median_iou == 0.0
