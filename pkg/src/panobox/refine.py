"""Occlusion handling and box refinement.

Four rules applied in a fixed order turn the raw projected boxes into the
published annotation set:
  1. boxes fully inside a nearer building box are removed; partial building
     overlaps shrink the occluded box in x until the overlap is gone,
  2. tree boxes covered more than a threshold by a nearer tree are removed
     (cascading nearest-first, removed trees no longer occlude),
  3. same-class boxes from different data sources merge when their IoU is
     high enough (union extent, metadata of all members retained),
  4. boxes covered more than a threshold by any nearer box of a blocking
     class are removed.

Overlap for rules 1, 2 and 4 is normalized by the occluded box's own area;
rule 3 uses IoU, which is symmetric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .model import BBox, BoxSet, ClassId, Stage

DEFAULT_NON_BLOCKING: frozenset[ClassId] = frozenset(
    {
        "bicycle_path",
        "railway_track",
        "bridge",
        "park",
        "ferry",
        "bus",
        "waterway",
        "train",
        "tram",
        "tree",
        "lamppost",
    }
)


@dataclass(frozen=True)
class RefineConfig:
    tree_overlap_threshold: float = 0.30
    general_overlap_threshold: float = 0.80
    merge_min_iou: float = 0.50
    non_blocking: frozenset[ClassId] = DEFAULT_NON_BLOCKING
    building_class: ClassId = "building"
    tree_class: ClassId = "tree"
    min_box_px: float = 1.0

    @classmethod
    def from_file(cls, path) -> "RefineConfig":
        raw = json.loads(Path(path).read_text())
        kwargs = {}
        for key in (
            "tree_overlap_threshold",
            "general_overlap_threshold",
            "merge_min_iou",
            "min_box_px",
        ):
            if key in raw:
                kwargs[key] = float(raw[key])
        if "non_blocking" in raw:
            kwargs["non_blocking"] = frozenset(raw["non_blocking"])
        for key in ("building_class", "tree_class"):
            if key in raw:
                kwargs[key] = str(raw[key])
        return cls(**kwargs)


def _intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    if w <= 0:
        return 0.0
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if h <= 0:
        return 0.0
    return w * h


def overlap_fraction(a: BBox, b: BBox) -> float:
    """Fraction of box a covered by box b."""
    area = a.area
    if area <= 0:
        raise ValueError("zero-area box")
    return _intersection_area(a, b) / area


def _depth_key(b: BBox):
    # Strict total order, nearest first. Equal distances rank the larger box
    # as nearer (it dominates visually), then the object id for determinism.
    if b.distance_m is None:
        raise ValueError("refinement requires distance_m on every box")
    return (b.distance_m, -b.area, b.object_id or "", b.x_min, b.y_min)


def _is_nearer(a: BBox, than: BBox) -> bool:
    return _depth_key(a) < _depth_key(than)


def _remove_with_partners(removed: set[int], idx: int, boxes: list[BBox | None]) -> None:
    removed.add(idx)
    link = boxes[idx].link_id if boxes[idx] else None
    if link is None:
        return
    for j, other in enumerate(boxes):
        if j != idx and other is not None and other.link_id == link:
            removed.add(j)


def _unlink(boxes: list[BBox | None], link_id: str) -> None:
    for j, other in enumerate(boxes):
        if other is not None and other.link_id == link_id:
            boxes[j] = replace(other, link_id=None)


def refine_buildings(box_set: BoxSet, config: RefineConfig = RefineConfig()) -> BoxSet:
    """Remove boxes hidden behind nearer buildings; shrink partial overlaps.

    Boxes are finalized nearest first, so every box is tested against the
    already-refined extents of all nearer buildings. A linked pair is removed
    atomically by full containment; a member shrunk away by the partial rule
    leaves its partner behind as a plain single box.
    """
    boxes: list[BBox | None] = list(box_set.boxes)
    order = sorted(range(len(boxes)), key=lambda i: _depth_key(boxes[i]))
    removed: set[int] = set()
    done: list[int] = []
    width_px = float(box_set.width_px)
    for i in order:
        if i in removed:
            done.append(i)
            continue
        box = boxes[i]
        blockers = [
            boxes[j]
            for j in done
            if j not in removed and boxes[j].class_id == config.building_class
        ]
        while True:
            area = box.area
            hits = [b for b in blockers if _intersection_area(box, b) > 0]
            contained = [b for b in hits if _intersection_area(box, b) >= area * (1 - 1e-12)]
            if contained:
                _remove_with_partners(removed, i, boxes)
                break
            if not hits:
                boxes[i] = box
                break
            # widest covered strip first, then re-test
            def covered_w(b: BBox) -> float:
                return min(box.x_max, b.x_max) - max(box.x_min, b.x_min)

            blk = max(hits, key=lambda b: (covered_w(b), -_depth_key(b)[0], b.x_min))
            ox1 = max(box.x_min, blk.x_min)
            ox2 = min(box.x_max, blk.x_max)
            if blk.x_max >= box.x_max - 1e-12 and ox2 >= box.x_max - 1e-12:
                new = replace(box, x_max=blk.x_min)
            elif blk.x_min <= box.x_min + 1e-12 and ox1 <= box.x_min + 1e-12:
                new = replace(box, x_min=blk.x_max)
            elif (blk.x_min - box.x_min) >= (box.x_max - blk.x_max):
                new = replace(box, x_max=blk.x_min)  # keep the wider left part
            else:
                new = replace(box, x_min=blk.x_max)
            if new.width < config.min_box_px:
                # shrunk to nothing: the partner (if any) stays as a single box
                removed.add(i)
                if box.link_id is not None:
                    _unlink(boxes, box.link_id)
                break
            if box.link_id is not None:
                touches_left = box.x_min <= 1e-9
                touches_right = box.x_max >= width_px - 1e-9
                still_pinned = (touches_left and new.x_min <= 1e-9) or (
                    touches_right and new.x_max >= width_px - 1e-9
                )
                if not still_pinned:
                    _unlink(boxes, box.link_id)
                    new = replace(new, link_id=None)
            box = new
            boxes[i] = box
        done.append(i)
    keep = [boxes[i] for i in range(len(boxes)) if i not in removed and boxes[i] is not None]
    return box_set.with_boxes(keep)


def refine_trees(
    box_set: BoxSet, threshold: float = 0.30, config: RefineConfig = RefineConfig()
) -> BoxSet:
    """Drop tree boxes mostly covered by a nearer kept tree (nearest first)."""
    boxes: list[BBox | None] = list(box_set.boxes)
    tree = config.tree_class
    order = sorted(
        (i for i, b in enumerate(boxes) if b.class_id == tree),
        key=lambda i: _depth_key(boxes[i]),
    )
    removed: set[int] = set()
    kept_trees: list[int] = []
    for i in order:
        if i in removed:
            continue
        box = boxes[i]
        occluded = any(
            overlap_fraction(box, boxes[j]) > threshold
            for j in kept_trees
            if j not in removed and _is_nearer(boxes[j], box)
        )
        if occluded:
            _remove_with_partners(removed, i, boxes)
        else:
            kept_trees.append(i)
    keep = [b for i, b in enumerate(boxes) if i not in removed]
    return box_set.with_boxes(keep)


def _sources(b: BBox) -> frozenset[str]:
    return frozenset((b.source or "").split("+")) - {""}


def _merge_pair(a: BBox, b: BBox) -> BBox:
    nearer, farther = (a, b) if _is_nearer(a, than=b) else (b, a)
    meta: dict[str, object] = {}
    collisions = set(a.metadata) & set(b.metadata)
    for box in (a, b):
        prefix = (box.source or "box") + ":"
        for k, v in box.metadata.items():
            meta[prefix + k if k in collisions else k] = v
    return BBox(
        class_id=a.class_id,
        x_min=min(a.x_min, b.x_min),
        y_min=min(a.y_min, b.y_min),
        x_max=max(a.x_max, b.x_max),
        y_max=max(a.y_max, b.y_max),
        object_id=nearer.object_id,
        link_id=None,
        distance_m=min(a.distance_m, b.distance_m),
        source="+".join(sorted(_sources(a) | _sources(b))) or None,
        metadata=meta,
    )


def _iou(a: BBox, b: BBox) -> float:
    inter = _intersection_area(a, b)
    if inter <= 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def merge_duplicates(box_set: BoxSet, min_iou: float = 0.50) -> BoxSet:
    """Fuse same-class boxes from disjoint sources whose IoU clears min_iou.

    Merging repeats until stable, so a chain of registrations collapses into
    one box carrying the union extent, the minimum distance and the metadata
    of every member (colliding keys are kept under source-prefixed names).
    """
    if not (0 < min_iou <= 1):
        raise ValueError("min_iou must be in (0, 1]")
    boxes: list[BBox] = list(box_set.boxes)
    changed = True
    while changed:
        changed = False
        n = len(boxes)
        for i in range(n):
            for j in range(i + 1, n):
                a, b = boxes[i], boxes[j]
                if a.class_id != b.class_id:
                    continue
                sa, sb = _sources(a), _sources(b)
                if not sa or not sb or (sa & sb):
                    continue
                if _iou(a, b) < min_iou:
                    continue
                merged = _merge_pair(a, b)
                for box in (a, b):
                    if box.link_id is not None:
                        for k, other in enumerate(boxes):
                            if other.link_id == box.link_id and other is not box:
                                boxes[k] = replace(other, link_id=None)
                boxes[i] = merged
                del boxes[j]
                changed = True
                break
            if changed:
                break
    return box_set.with_boxes(boxes)


def refine_general(
    box_set: BoxSet,
    threshold: float = 0.80,
    config: RefineConfig = RefineConfig(),
) -> BoxSet:
    """Remove boxes mostly covered by a nearer box of a blocking class.

    Occluders are taken from the set as it stood on entry: a box removed by
    this rule still corresponds to a physical object and keeps occluding.
    """
    boxes: list[BBox | None] = list(box_set.boxes)
    occluders = [
        b for b in box_set.boxes if b.class_id not in config.non_blocking
    ]
    removed: set[int] = set()
    for i, box in enumerate(boxes):
        if i in removed:
            continue
        for occ in occluders:
            if occ is box or not _is_nearer(occ, box):
                continue
            if overlap_fraction(box, occ) > threshold:
                _remove_with_partners(removed, i, boxes)
                break
    keep = [b for i, b in enumerate(boxes) if i not in removed]
    return box_set.with_boxes(keep)


def refine_pipeline(box_set: BoxSet, config: RefineConfig = RefineConfig()) -> BoxSet:
    """Run the four refinement rules in order on a freshly generated set."""
    if box_set.stage != Stage.GENERATED:
        raise ValueError(f"refine_pipeline expects a generated set, got {box_set.stage.value}")
    out = refine_buildings(box_set, config)
    out = refine_trees(out, config.tree_overlap_threshold, config)
    out = merge_duplicates(out, config.merge_min_iou)
    out = refine_general(out, config.general_overlap_threshold, config)
    return out.with_stage(Stage.REFINED)
