"""Evaluation metrics: weighted F-score, COCO-style mAP, recall@k and
gold-standard scoring of annotation work."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import BBox, BoxSet, ClassId
from .noise import iou, match_boxes, unroll_linked

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: ClassId
    box: BBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("score must be in [0, 1]")


# ---------------------------------------------------------------------------
# Image-label F-score


def weighted_fscore(
    pred_labels: Mapping[str, Iterable[ClassId]],
    true_labels: Mapping[str, Iterable[ClassId]],
    class_ids: Sequence[ClassId],
) -> dict:
    """Per-class F from image-level presence plus the support-weighted mean.

    F = 2 * precision * recall / (precision + recall); the aggregate weights
    each class by its number of positive images in the truth, excluding
    classes that never occur.
    """
    if set(pred_labels) != set(true_labels):
        raise ValueError("prediction and truth must cover the same images")
    if not true_labels:
        raise ValueError("empty inputs")
    per_class = {}
    weighted_sum = 0.0
    support_total = 0
    for c in class_ids:
        tp = fp = fn = 0
        for img in true_labels:
            p = c in set(pred_labels[img])
            t = c in set(true_labels[img])
            tp += p and t
            fp += p and not t
            fn += t and not p
        support = tp + fn
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_class[c] = {"precision": precision, "recall": recall, "f": f, "support": support}
        weighted_sum += support * f
        support_total += support
    weighted = weighted_sum / support_total if support_total else 0.0
    return {"per_class": per_class, "weighted_f": weighted}


# ---------------------------------------------------------------------------
# COCO-style detection metrics

_RECALL_GRID = np.linspace(0.0, 1.0, 101)


def _average_precision(tp_flags: np.ndarray, n_truth: int) -> float:
    """101-point interpolated AP from TP flags in descending-score order."""
    if n_truth == 0:
        return float("nan")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_truth
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    interp = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(interp.mean())


def _greedy_match_flags(
    dets: list[Detection],
    truth_by_image: Mapping[str, list[BBox]],
    threshold: float,
) -> np.ndarray:
    """TP flag per detection (already sorted by descending score), greedy
    matching each detection to the best still-unmatched truth of its image."""
    taken: dict[str, set[int]] = {}
    flags = np.zeros(len(dets), dtype=bool)
    for k, det in enumerate(dets):
        truths = truth_by_image.get(det.image_id, [])
        used = taken.setdefault(det.image_id, set())
        best_iou = 0.0
        best_j = -1
        for j, t in enumerate(truths):
            if j in used:
                continue
            v = iou(det.box, t)
            if v >= threshold and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            used.add(best_j)
            flags[k] = True
    return flags


def _det_sort_key(d: Detection):
    return (-d.score, d.image_id, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)


def coco_map(
    dets: Sequence[Detection],
    truth: Mapping[str, BoxSet],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> dict:
    """COCO protocol mAP: greedy score-ordered matching per class and
    threshold, 101-point interpolated AP, averaged over thresholds and over
    classes that have ground truth."""
    classes = sorted({b.class_id for bs in truth.values() for b in bs.boxes})
    truth_by_class: dict[ClassId, dict[str, list[BBox]]] = {c: {} for c in classes}
    for pid, bs in truth.items():
        for b in bs.boxes:
            truth_by_class.setdefault(b.class_id, {}).setdefault(pid, []).append(b)
    per_class: dict[ClassId, dict[float, float]] = {}
    for c in classes:
        class_dets = sorted((d for d in dets if d.class_id == c), key=_det_sort_key)
        n_truth = sum(len(v) for v in truth_by_class[c].values())
        per_class[c] = {}
        for thr in iou_thresholds:
            flags = _greedy_match_flags(class_dets, truth_by_class[c], thr)
            per_class[c][thr] = _average_precision(flags, n_truth)
    def mean_over_classes(thrs) -> float:
        vals = [
            float(np.mean([per_class[c][t] for t in thrs]))
            for c in classes
        ]
        return float(np.mean(vals)) if vals else 0.0

    result = {
        "map": mean_over_classes(iou_thresholds),
        "per_class": {c: float(np.mean(list(per_class[c].values()))) for c in classes},
        "per_class_per_threshold": per_class,
    }
    if 0.5 in iou_thresholds:
        result["map50"] = mean_over_classes([0.5])
    return result


def recall_at_k(
    dets: Sequence[Detection],
    truth: Mapping[str, BoxSet],
    k: int = 100,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> float:
    """Average recall keeping only the top-k detections per image.

    Recall is the matched fraction of truths per class and IoU threshold,
    averaged over thresholds and classes with ground truth.
    """
    by_image: dict[str, list[Detection]] = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    kept: list[Detection] = []
    for pid in sorted(by_image):
        ranked = sorted(by_image[pid], key=_det_sort_key)
        kept.extend(ranked[:k])

    classes = sorted({b.class_id for bs in truth.values() for b in bs.boxes})
    recalls = []
    for c in classes:
        class_dets = sorted((d for d in kept if d.class_id == c), key=_det_sort_key)
        truth_c: dict[str, list[BBox]] = {}
        for pid, bs in truth.items():
            boxes = [b for b in bs.boxes if b.class_id == c]
            if boxes:
                truth_c[pid] = boxes
        n_truth = sum(len(v) for v in truth_c.values())
        if n_truth == 0:
            continue
        for thr in iou_thresholds:
            flags = _greedy_match_flags(class_dets, truth_c, thr)
            recalls.append(float(flags.sum()) / n_truth)
    return float(np.mean(recalls)) if recalls else 0.0


# ---------------------------------------------------------------------------
# Gold-standard scoring


@dataclass(frozen=True)
class GoldScore:
    median_iou: float
    passed: bool
    n_matched: int
    n_gold: int
    samples: tuple[float, ...]


def gold_score(
    worker: BoxSet, gold: BoxSet, *, pass_threshold: float = 0.4
) -> GoldScore:
    """Median IoU of class-restricted optimal matches against the gold set.

    Every unmatched gold box contributes an IoU of 0, so deleting everything
    cannot score well. Passing means median >= pass_threshold.
    """
    if not gold.boxes:
        raise ValueError("empty gold set")
    if worker.panorama_id != gold.panorama_id:
        raise ValueError("worker and gold sets are for different panoramas")
    w_boxes = unroll_linked(worker.boxes, worker.width_px)
    g_boxes = unroll_linked(gold.boxes, gold.width_px)
    samples: list[float] = []
    n_matched = 0
    classes = {b.class_id for b in w_boxes} | {b.class_id for b in g_boxes}
    for c in sorted(classes):
        ws = [b for b in w_boxes if b.class_id == c]
        gs = [b for b in g_boxes if b.class_id == c]
        pairs = match_boxes(ws, gs, "giou")
        for wi, gi in pairs:
            samples.append(iou(ws[wi], gs[gi]))
        n_matched += len(pairs)
        samples.extend(0.0 for _ in range(len(gs) - len(pairs)))
    median = statistics.median(samples) if samples else 0.0
    return GoldScore(
        median_iou=median,
        passed=median >= pass_threshold,
        n_matched=n_matched,
        n_gold=len(g_boxes),
        samples=tuple(samples),
    )
