"""Annotation-noise analysis between a noisy and a reference box collection.

Boxes are matched per image with an exact optimal assignment (Hungarian
method via scipy); overlap quality is summarized per class as IoU / GIoU
distributions and matched fractions, coordinate shifts are collected
class-agnostically, and image-level class labels are scored for precision,
recall and per-image accuracy.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import BBox, BoxSet, ClassId


def _check_positive_area(*boxes: BBox) -> None:
    for b in boxes:
        if b.area <= 0:
            raise ValueError("zero-area box")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    _check_positive_area(a, b)
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    _check_positive_area(a, b)
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = w * h if (w > 0 and h > 0) else 0.0
    union = a.area + b.area - inter
    cw = max(a.x_max, b.x_max) - min(a.x_min, b.x_min)
    ch = max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    c_area = cw * ch
    penalty = max(0.0, c_area - union) / c_area
    return inter / union - penalty


def _coord_l2(a: BBox, b: BBox) -> float:
    return math.sqrt(
        (a.x_min - b.x_min) ** 2
        + (a.y_min - b.y_min) ** 2
        + (a.x_max - b.x_max) ** 2
        + (a.y_max - b.y_max) ** 2
    )


def match_boxes(
    noisy: Sequence[BBox], clean: Sequence[BBox], cost: str = "giou"
) -> list[tuple[int, int]]:
    """Exact optimal assignment between two box lists.

    cost "giou" / "iou" maximizes the total overlap score; "coord_l2"
    minimizes the total 4-d coordinate distance. The assignment has size
    min(len(noisy), len(clean)); no overlap floor is applied, so zero-overlap
    pairs are legitimate matches.
    """
    if not noisy or not clean:
        return []
    if cost == "giou":
        mat = np.array([[-giou(n, c) for c in clean] for n in noisy])
    elif cost == "iou":
        mat = np.array([[-iou(n, c) for c in clean] for n in noisy])
    elif cost == "coord_l2":
        mat = np.array([[_coord_l2(n, c) for c in clean] for n in noisy])
    else:
        raise ValueError(f"unknown cost: {cost}")
    rows, cols = linear_sum_assignment(mat)
    return sorted(zip(rows.tolist(), cols.tolist()))


def unroll_linked(boxes: Sequence[BBox], width_px: float) -> list[BBox]:
    """Replace each linked pair by one contiguous box in an extended x-domain.

    The right-edge member shifts left by the image width so the object
    becomes a single rectangle spanning negative x; seam objects then match
    as one instance. Non-linked boxes pass through unchanged.
    """
    by_link: dict[str, list[BBox]] = {}
    for b in boxes:
        if b.link_id is not None:
            by_link.setdefault(b.link_id, []).append(b)
    out: list[BBox] = []
    consumed: set[int] = set()
    for link_id, members in by_link.items():
        if len(members) != 2:
            continue  # malformed link: leave the members as-is
        left = min(members, key=lambda b: b.x_min)
        right = max(members, key=lambda b: b.x_max)
        merged = BBox(
            class_id=left.class_id,
            x_min=right.x_min - width_px,
            y_min=min(left.y_min, right.y_min),
            x_max=left.x_max,
            y_max=max(left.y_max, right.y_max),
            object_id=left.object_id or right.object_id,
            link_id=None,
            distance_m=left.distance_m if left.distance_m is not None else right.distance_m,
            source=left.source,
            metadata=dict(left.metadata),
        )
        out.append(merged)
        consumed.update(id(m) for m in members)
    out.extend(b for b in boxes if id(b) not in consumed)
    return out


@dataclass
class ClassOverlap:
    n_noisy: int = 0
    n_clean: int = 0
    n_matched: int = 0
    ious: list[float] = field(default_factory=list)
    gious: list[float] = field(default_factory=list)

    @property
    def matched_noisy_fraction(self) -> float:
        return self.n_matched / self.n_noisy if self.n_noisy else 0.0

    @property
    def matched_clean_fraction(self) -> float | None:
        return self.n_matched / self.n_clean if self.n_clean else None

    def quantiles(self, values: list[float]) -> dict[str, float] | None:
        if not values:
            return None
        if len(values) == 1:
            v = values[0]
            return {"q25": v, "median": v, "q75": v}
        q = statistics.quantiles(values, n=4, method="inclusive")
        return {"q25": q[0], "median": q[1], "q75": q[2]}


@dataclass
class MatchReport:
    per_class: dict[ClassId, ClassOverlap] = field(default_factory=dict)
    shifts: dict[str, list[float]] = field(
        default_factory=lambda: {"dx_min": [], "dy_min": [], "dx_max": [], "dy_max": []}
    )

    def to_json_dict(self) -> dict:
        per_class = {}
        for cid, st in sorted(self.per_class.items()):
            per_class[cid] = {
                "n_noisy": st.n_noisy,
                "n_clean": st.n_clean,
                "n_matched": st.n_matched,
                "matched_noisy_fraction": st.matched_noisy_fraction,
                "matched_clean_fraction": st.matched_clean_fraction,
                "iou": st.ious,
                "giou": st.gious,
                "iou_quantiles": st.quantiles(st.ious),
                "giou_quantiles": st.quantiles(st.gious),
            }
        return {"per_class": per_class, "shifts": self.shifts}


def _require_same_ids(noisy: Mapping[str, BoxSet], clean: Mapping[str, BoxSet]) -> None:
    if set(noisy) != set(clean):
        missing = sorted(set(noisy) ^ set(clean))
        raise ValueError(f"panorama id mismatch between collections: {missing[:5]}")


def overlap_report(
    noisy: Mapping[str, BoxSet], clean: Mapping[str, BoxSet]
) -> MatchReport:
    """Per-class matched fractions and IoU/GIoU samples (GIoU-cost matching)."""
    _require_same_ids(noisy, clean)
    report = MatchReport()
    for pid in sorted(noisy):
        n_set, c_set = noisy[pid], clean[pid]
        n_boxes = unroll_linked(n_set.boxes, n_set.width_px)
        c_boxes = unroll_linked(c_set.boxes, c_set.width_px)
        classes = {b.class_id for b in n_boxes} | {b.class_id for b in c_boxes}
        for cid in classes:
            ns = [b for b in n_boxes if b.class_id == cid]
            cs = [b for b in c_boxes if b.class_id == cid]
            st = report.per_class.setdefault(cid, ClassOverlap())
            st.n_noisy += len(ns)
            st.n_clean += len(cs)
            for ni, ci in match_boxes(ns, cs, "giou"):
                st.n_matched += 1
                st.ious.append(iou(ns[ni], cs[ci]))
                st.gious.append(giou(ns[ni], cs[ci]))
    return report


def shift_report(
    noisy: Mapping[str, BoxSet], clean: Mapping[str, BoxSet]
) -> dict[str, list[float]]:
    """Signed per-coordinate shifts (noisy - clean) of class-agnostic matches."""
    _require_same_ids(noisy, clean)
    shifts: dict[str, list[float]] = {"dx_min": [], "dy_min": [], "dx_max": [], "dy_max": []}
    for pid in sorted(noisy):
        n_set, c_set = noisy[pid], clean[pid]
        ns = unroll_linked(n_set.boxes, n_set.width_px)
        cs = unroll_linked(c_set.boxes, c_set.width_px)
        for ni, ci in match_boxes(ns, cs, "coord_l2"):
            shifts["dx_min"].append(ns[ni].x_min - cs[ci].x_min)
            shifts["dy_min"].append(ns[ni].y_min - cs[ci].y_min)
            shifts["dx_max"].append(ns[ni].x_max - cs[ci].x_max)
            shifts["dy_max"].append(ns[ni].y_max - cs[ci].y_max)
    return shifts


def noise_report(noisy: Mapping[str, BoxSet], clean: Mapping[str, BoxSet]) -> MatchReport:
    """Full noise report: per-class overlap stats plus coordinate shifts."""
    report = overlap_report(noisy, clean)
    report.shifts = shift_report(noisy, clean)
    return report


@dataclass
class LabelReport:
    per_class: dict[ClassId, dict[str, float | None]] = field(default_factory=dict)
    image_accuracy: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "per_class": {c: self.per_class[c] for c in sorted(self.per_class)},
            "image_accuracy": dict(sorted(self.image_accuracy.items())),
        }


def label_report(
    noisy: Mapping[str, BoxSet],
    clean: Mapping[str, BoxSet],
    class_ids: Sequence[ClassId],
) -> LabelReport:
    """Image-level presence labels scored against the clean collection.

    Precision and recall are per class over images (clean presence is truth);
    per-image accuracy is the fraction of class_ids whose presence bit agrees.
    """
    _require_same_ids(noisy, clean)
    report = LabelReport()
    counts = {c: {"tp": 0, "fp": 0, "fn": 0} for c in class_ids}
    for pid in sorted(noisy):
        n_present = {b.class_id for b in noisy[pid].boxes}
        c_present = {b.class_id for b in clean[pid].boxes}
        agree = 0
        for c in class_ids:
            np_, cp = c in n_present, c in c_present
            if np_ and cp:
                counts[c]["tp"] += 1
            elif np_ and not cp:
                counts[c]["fp"] += 1
            elif cp and not np_:
                counts[c]["fn"] += 1
            if np_ == cp:
                agree += 1
        report.image_accuracy[pid] = agree / len(class_ids) if class_ids else 1.0
    for c, k in counts.items():
        tp, fp, fn = k["tp"], k["fp"], k["fn"]
        report.per_class[c] = {
            "precision": tp / (tp + fp) if (tp + fp) else None,
            "recall": tp / (tp + fn) if (tp + fn) else None,
            "tp": tp,
            "fp": fp,
            "fn": fn,
        }
    return report


def save_report(report: MatchReport, labels: LabelReport | None, path) -> None:
    doc = {"overlap": report.to_json_dict()}
    if labels is not None:
        doc["labels"] = labels.to_json_dict()
    from pathlib import Path

    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))
