"""Dataset mechanics: statistics, splits, sampling and geometry transforms.

Covers size bucketing, per-class/image statistics with distortion-band
fractions, neighbourhood-grouped splits, repeat-factor oversampling for
long-tail classes, circular seam padding with bottom crop, classification
tiling and curriculum ordering.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .model import BBox, BoxSet, ClassId, PanoramaMeta


class SizeBucket(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


SMALL_MAX_AREA = 32 * 32    # < 1024 is small
MEDIUM_MAX_AREA = 96 * 96   # 1024..9216 inclusive is medium


def size_bucket(box: BBox) -> SizeBucket:
    area = box.area
    if area < SMALL_MAX_AREA:
        return SizeBucket.SMALL
    if area <= MEDIUM_MAX_AREA:
        return SizeBucket.MEDIUM
    return SizeBucket.LARGE


@dataclass
class DatasetStats:
    instances_per_class: Counter = field(default_factory=Counter)
    size_counts: dict[ClassId, Counter] = field(default_factory=dict)
    classes_per_image: Counter = field(default_factory=Counter)
    instances_per_image: Counter = field(default_factory=Counter)
    top_band_counts: Counter = field(default_factory=Counter)
    bottom_band_counts: Counter = field(default_factory=Counter)
    n_images: int = 0

    def size_percentages(self, class_id: ClassId) -> dict[str, float]:
        counts = self.size_counts.get(class_id, Counter())
        total = sum(counts.values())
        if not total:
            return {b.value: 0.0 for b in SizeBucket}
        return {b.value: 100.0 * counts.get(b, 0) / total for b in SizeBucket}

    def band_fractions(self, class_id: ClassId) -> dict[str, float]:
        total = self.instances_per_class.get(class_id, 0)
        if not total:
            return {"top": 0.0, "bottom": 0.0}
        return {
            "top": self.top_band_counts.get(class_id, 0) / total,
            "bottom": self.bottom_band_counts.get(class_id, 0) / total,
        }

    def to_json_dict(self) -> dict:
        classes = sorted(self.instances_per_class)
        return {
            "n_images": self.n_images,
            "instances_per_class": {c: self.instances_per_class[c] for c in classes},
            "size_percentages": {c: self.size_percentages(c) for c in classes},
            "band_fractions": {c: self.band_fractions(c) for c in classes},
            "classes_per_image": {str(k): v for k, v in sorted(self.classes_per_image.items())},
            "instances_per_image": {str(k): v for k, v in sorted(self.instances_per_image.items())},
        }


def dataset_stats(
    sets: Iterable[BoxSet], *, top_band_px: float = 50.0, bottom_band_px: float = 150.0
) -> DatasetStats:
    """Tally instance counts, size buckets, per-image histograms and the
    fraction of instances touching the distorted top/bottom image bands."""
    stats = DatasetStats()
    for bs in sets:
        stats.n_images += 1
        stats.classes_per_image[len({b.class_id for b in bs.boxes})] += 1
        stats.instances_per_image[len(bs.boxes)] += 1
        for b in bs.boxes:
            stats.instances_per_class[b.class_id] += 1
            stats.size_counts.setdefault(b.class_id, Counter())[size_bucket(b)] += 1
            if b.y_min < top_band_px:
                stats.top_band_counts[b.class_id] += 1
            if b.y_max > bs.height_px - bottom_band_px:
                stats.bottom_band_counts[b.class_id] += 1
    return stats


# ---------------------------------------------------------------------------
# Neighbourhood-grouped splits


class SplitError(ValueError):
    def __init__(self, message: str, unsatisfiable: Sequence[ClassId] = ()):
        super().__init__(message)
        self.unsatisfiable = list(unsatisfiable)


@dataclass(frozen=True)
class SplitAssignment:
    by_image: dict[str, str]
    neighbourhood_of: dict[str, str]

    def images_in(self, split: str) -> list[str]:
        return sorted(i for i, s in self.by_image.items() if s == split)

    def to_json_dict(self) -> dict:
        return {
            "by_image": dict(sorted(self.by_image.items())),
            "neighbourhood_of": dict(sorted(self.neighbourhood_of.items())),
        }


def group_split(
    panos: Sequence[PanoramaMeta],
    neighbourhoods: Mapping[str, str],
    targets: Mapping[str, float],
    required_classes: Mapping[str, Iterable[ClassId]] | None = None,
    image_classes: Mapping[str, Iterable[ClassId]] | None = None,
    seed: int = 0,
) -> SplitAssignment:
    """Assign whole neighbourhoods to splits, greedily honoring size targets.

    Neighbourhoods containing classes that some split requires are pinned
    first (rarest class first); the rest go largest first to the split
    furthest below its image-count target. Deterministic for a fixed seed.
    """
    total_target = sum(targets.values())
    if abs(total_target - 1.0) > 1e-6:
        raise SplitError(f"split fractions sum to {total_target}, expected 1")
    members: dict[str, list[str]] = {}
    for p in panos:
        if p.id not in neighbourhoods:
            raise SplitError(f"image without neighbourhood: {p.id}")
        members.setdefault(neighbourhoods[p.id], []).append(p.id)
    nb_classes: dict[str, set[ClassId]] = {nb: set() for nb in members}
    if image_classes:
        for nb, imgs in members.items():
            for img in imgs:
                nb_classes[nb].update(image_classes.get(img, ()))

    splits = list(targets)
    total = sum(len(v) for v in members.values())
    assigned_count = {s: 0 for s in splits}
    assignment: dict[str, str] = {}

    def deficit(s: str) -> float:
        return targets[s] * total - assigned_count[s]

    def assign(nb: str, split: str) -> None:
        assignment[nb] = split
        assigned_count[split] += len(members[nb])

    unsatisfiable: list[ClassId] = []
    if required_classes:
        if image_classes is None:
            raise SplitError("required_classes needs image_classes to locate classes")
        holders = {
            c: sorted(nb for nb, cs in nb_classes.items() if c in cs)
            for s in required_classes
            for c in required_classes[s]
        }
        needs = sorted(
            ((c, s) for s in required_classes for c in required_classes[s]),
            key=lambda cs: (len(holders[cs[0]]), cs[0], cs[1]),
        )
        for c, s in needs:
            covered = any(
                assignment.get(nb) == s and c in nb_classes[nb] for nb in assignment
            )
            if covered:
                continue
            candidates = [nb for nb in holders[c] if nb not in assignment]
            if not candidates:
                unsatisfiable.append(c)
                continue
            pick = min(candidates, key=lambda nb: (len(members[nb]), nb))
            assign(pick, s)
        if unsatisfiable:
            raise SplitError(
                "unsatisfiable class constraints: " + ", ".join(sorted(set(unsatisfiable))),
                unsatisfiable=sorted(set(unsatisfiable)),
            )

    rng = random.Random(seed)
    tie = {nb: rng.random() for nb in sorted(members)}
    rest = sorted(
        (nb for nb in members if nb not in assignment),
        key=lambda nb: (-len(members[nb]), tie[nb], nb),
    )
    for nb in rest:
        best = max(splits, key=lambda s: (deficit(s), -splits.index(s)))
        assign(nb, best)

    by_image = {}
    nb_of = {}
    for nb, imgs in members.items():
        for img in imgs:
            by_image[img] = assignment[nb]
            nb_of[img] = nb
    return SplitAssignment(by_image=by_image, neighbourhood_of=nb_of)


# ---------------------------------------------------------------------------
# Repeat factor sampling


@dataclass(frozen=True)
class SamplingPlan:
    class_repeat: dict[ClassId, float]
    image_repeat: dict[str, float]
    epoch: list[str]
    t: float
    seed: int

    @property
    def expected_epoch_size(self) -> float:
        return sum(self.image_repeat.values())

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "seed": self.seed,
            "class_repeat": dict(sorted(self.class_repeat.items())),
            "image_repeat": dict(sorted(self.image_repeat.items())),
            "epoch": self.epoch,
        }


def class_repeat_factor(f_c: float, t: float) -> float:
    return max(1.0, math.sqrt(t / f_c))


def repeat_factors(
    image_classes: Mapping[str, Iterable[ClassId]], t: float = 0.1, seed: int = 0
) -> SamplingPlan:
    """Oversampling plan: r_c = max(1, sqrt(t / f_c)), r_i = max of r_c present.

    The realized epoch repeats each image floor(r_i) times plus one more with
    probability frac(r_i), drawn from a generator seeded with `seed`.
    """
    if not (0 < t <= 1):
        raise ValueError("t must be in (0, 1]")
    images = sorted(image_classes)
    n = len(images)
    presence: Counter = Counter()
    for img in images:
        for c in set(image_classes[img]):
            presence[c] += 1
    r_c = {c: class_repeat_factor(presence[c] / n, t) for c in sorted(presence)}
    r_i = {
        img: max((r_c[c] for c in set(image_classes[img])), default=1.0)
        for img in images
    }
    rng = random.Random(seed)
    epoch: list[str] = []
    for img in images:
        reps = int(r_i[img])
        if rng.random() < r_i[img] - reps:
            reps += 1
        epoch.extend([img] * reps)
    return SamplingPlan(class_repeat=r_c, image_repeat=r_i, epoch=epoch, t=t, seed=seed)


# ---------------------------------------------------------------------------
# Circular padding / cropping / tiling


PAD_DUPLICATE_KEY = "pad_duplicate"


def circular_pad(
    box_set: BoxSet,
    pad_px: float = 25.0,
    min_dup_width: float = 20.0,
    crop_bottom_px: float = 150.0,
    *,
    min_box_px: float = 1.0,
) -> BoxSet:
    """Rewrite boxes for a canvas padded on both sides with seam content and
    cropped at the bottom.

    Each linked pair becomes one box spanning the seam in padded coordinates
    (growing only by what is visible in the pad strip); non-linked boxes
    overlapping a pad source strip by at least min_dup_width get a duplicated
    partial box inside the pad. The output canvas is
    (width + 2 * pad) x (height - crop_bottom).
    """
    w = float(box_set.width_px)
    h = float(box_set.height_px)
    if pad_px >= w:
        raise ValueError("pad_px must be smaller than the image width")
    new_w = w + 2 * pad_px
    new_h = h - crop_bottom_px

    def clip(box: BBox) -> BBox | None:
        x0 = max(0.0, min(new_w, box.x_min))
        x1 = max(0.0, min(new_w, box.x_max))
        y0 = max(0.0, min(new_h, box.y_min))
        y1 = max(0.0, min(new_h, box.y_max))
        if x1 - x0 < min_box_px or y1 - y0 < min_box_px:
            return None
        return replace(box, x_min=x0, y_min=y0, x_max=x1, y_max=y1)

    out: list[BBox] = []
    by_link: dict[str, list[BBox]] = {}
    singles: list[BBox] = []
    for b in box_set.boxes:
        if b.link_id is not None:
            by_link.setdefault(b.link_id, []).append(b)
        else:
            singles.append(b)

    for link_id, pair in sorted(by_link.items()):
        if len(pair) != 2:
            singles.extend(pair)
            continue
        left = min(pair, key=lambda b: b.x_min)
        right = max(pair, key=lambda b: b.x_max)
        lw = left.width
        rw = right.width
        y0 = min(left.y_min, right.y_min)
        y1 = max(left.y_max, right.y_max)
        # choose the placement losing the least width to the canvas clamp
        loss_right = max(0.0, lw - pad_px)   # left member drawn into the right pad
        loss_left = max(0.0, rw - pad_px)    # right member drawn into the left pad
        if loss_right <= loss_left:
            x0, x1 = right.x_min + pad_px, w + pad_px + lw
        else:
            x0, x1 = pad_px - rw, left.x_max + pad_px
        merged = replace(
            left,
            x_min=x0,
            x_max=x1,
            y_min=y0,
            y_max=y1,
            link_id=None,
            object_id=left.object_id or right.object_id,
        )
        clipped = clip(merged)
        if clipped:
            out.append(clipped)

    for b in singles:
        shifted = clip(replace(b, x_min=b.x_min + pad_px, x_max=b.x_max + pad_px))
        if shifted:
            out.append(shifted)
        # duplicate into the left pad: source strip is the rightmost pad_px
        right_ov = b.x_max - max(b.x_min, w - pad_px)
        if right_ov >= min_dup_width:
            dup = clip(
                replace(
                    b,
                    x_min=max(b.x_min, w - pad_px) - (w - pad_px),
                    x_max=b.x_max - (w - pad_px),
                    link_id=None,
                    metadata={**b.metadata, PAD_DUPLICATE_KEY: True},
                )
            )
            if dup:
                out.append(dup)
        # duplicate into the right pad: source strip is the leftmost pad_px
        left_ov = min(b.x_max, pad_px) - b.x_min
        if left_ov >= min_dup_width:
            dup = clip(
                replace(
                    b,
                    x_min=w + pad_px + b.x_min,
                    x_max=w + pad_px + min(b.x_max, pad_px),
                    link_id=None,
                    metadata={**b.metadata, PAD_DUPLICATE_KEY: True},
                )
            )
            if dup:
                out.append(dup)

    return BoxSet(
        panorama_id=box_set.panorama_id,
        width_px=int(round(new_w)),
        height_px=int(round(new_h)),
        boxes=tuple(out),
        stage=box_set.stage,
    )


def circular_unpad(box_set: BoxSet, pad_px: float, width_px: int, height_px: int) -> BoxSet:
    """Partial inverse of circular_pad: drops pad duplicates and boxes fully
    inside the pad strips, then shifts x back. Bottom-crop clipping and
    linked-pair merging are not undone."""
    w = float(width_px)
    out = []
    for b in box_set.boxes:
        if b.metadata.get(PAD_DUPLICATE_KEY):
            continue
        if b.x_max <= pad_px or b.x_min >= w + pad_px:
            continue
        x0 = max(0.0, b.x_min - pad_px)
        x1 = min(w, b.x_max - pad_px)
        out.append(replace(b, x_min=x0, x_max=x1))
    return BoxSet(
        panorama_id=box_set.panorama_id,
        width_px=width_px,
        height_px=height_px,
        boxes=tuple(out),
        stage=box_set.stage,
    )


@dataclass(frozen=True)
class Tile:
    index: int
    x_offset: float
    window: tuple[float, float, float, float]  # x0, y0, x1, y1 in padded coords
    output_size: tuple[int, int]
    positive_classes: frozenset[ClassId]


def classification_tiles(
    box_set: BoxSet,
    tile_px: int = 500,
    overlap_px: int = 25,
    top_crop_px: int = 50,
    output_size: tuple[int, int] = (224, 224),
) -> list[Tile]:
    """Cut the padded detection canvas into overlapping square tiles.

    Expects the circular-padded geometry; the top crop is applied first so
    the remaining height equals the tile size. A tile is positive for a class
    iff any box of that class intersects its window. The declared output size
    is bookkeeping only; no pixels are resampled here.
    """
    w = box_set.width_px
    h = box_set.height_px
    n_tiles = 3
    expect_w = n_tiles * tile_px - (n_tiles - 1) * overlap_px
    if w != expect_w or h - top_crop_px != tile_px:
        raise ValueError(
            f"geometry mismatch: got {w}x{h}, expected {expect_w}x{tile_px + top_crop_px}"
        )
    tiles = []
    for i in range(n_tiles):
        x0 = float(i * (tile_px - overlap_px))
        window = (x0, float(top_crop_px), x0 + tile_px, float(h))
        positive = frozenset(
            b.class_id
            for b in box_set.boxes
            if b.x_min < window[2] and b.x_max > window[0] and b.y_max > window[1]
        )
        tiles.append(
            Tile(index=i, x_offset=x0, window=window, output_size=output_size,
                 positive_classes=positive)
        )
    return tiles


# ---------------------------------------------------------------------------
# Curriculum ordering


def curriculum_order(instance_counts: Mapping[str, int]) -> list[str]:
    """Image ids sorted by ascending instance count, ties by id."""
    return sorted(instance_counts, key=lambda img: (instance_counts[img], img))


def curriculum_shards(
    instance_counts: Mapping[str, int],
    neighbourhoods: Mapping[str, str],
    n_shards: int = 120,
) -> list[list[str]]:
    """Deal images into shards round-robin by neighbourhood, then order each
    shard by ascending instance count (geographically balanced curriculum)."""
    members: dict[str, list[str]] = {}
    for img in sorted(instance_counts):
        members.setdefault(neighbourhoods.get(img, ""), []).append(img)
    shards: list[list[str]] = [[] for _ in range(n_shards)]
    k = 0
    for nb in sorted(members):
        for img in members[nb]:
            shards[k % n_shards].append(img)
            k += 1
    for shard in shards:
        shard.sort(key=lambda img: (instance_counts[img], img))
    return shards
