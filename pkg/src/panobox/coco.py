"""COCO-style annotation files, one per panorama, plus detection results.

The schema follows the common images/annotations/categories layout with
bbox given as [x, y, width, height]; pipeline-specific fields (link id,
camera distance, provenance, metadata) live under an `ext` key on each
annotation so standard tooling can ignore them.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model import BBox, BoxSet, ClassId, DEFAULT_CLASS_IDS, Stage


def category_ids(class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS) -> dict[ClassId, int]:
    return {cid: i + 1 for i, cid in enumerate(class_order)}


def boxset_to_dict(bs: BoxSet, class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS) -> dict:
    cats = category_ids(class_order)
    annotations = []
    for i, b in enumerate(bs.boxes, start=1):
        if b.class_id not in cats:
            raise ValueError(f"class not in category table: {b.class_id}")
        ext: dict = {}
        if b.object_id is not None:
            ext["object_id"] = b.object_id
        if b.link_id is not None:
            ext["link_id"] = b.link_id
        if b.distance_m is not None:
            ext["distance_m"] = b.distance_m
        if b.source is not None:
            ext["source"] = b.source
        if b.metadata:
            ext["metadata"] = dict(b.metadata)
        annotations.append(
            {
                "id": i,
                "image_id": bs.panorama_id,
                "category_id": cats[b.class_id],
                "bbox": [b.x_min, b.y_min, b.width, b.height],
                "area": b.area,
                "iscrowd": 0,
                "ext": ext,
            }
        )
    return {
        "images": [{"id": bs.panorama_id, "width": bs.width_px, "height": bs.height_px}],
        "annotations": annotations,
        "categories": [{"id": cid, "name": name} for name, cid in cats.items()],
        "stage": bs.stage.value,
    }


def boxset_from_dict(doc: Mapping) -> BoxSet:
    images = doc.get("images") or []
    if len(images) != 1:
        raise ValueError("expected exactly one image entry per file")
    img = images[0]
    names = {c["id"]: c["name"] for c in doc.get("categories", [])}
    boxes = []
    for ann in doc.get("annotations", []):
        x, y, w, h = ann["bbox"]
        ext = ann.get("ext", {})
        boxes.append(
            BBox(
                class_id=names[ann["category_id"]],
                x_min=float(x),
                y_min=float(y),
                x_max=float(x) + float(w),
                y_max=float(y) + float(h),
                object_id=ext.get("object_id"),
                link_id=ext.get("link_id"),
                distance_m=ext.get("distance_m"),
                source=ext.get("source"),
                metadata=ext.get("metadata", {}),
            )
        )
    return BoxSet(
        panorama_id=str(img["id"]),
        width_px=int(img["width"]),
        height_px=int(img["height"]),
        boxes=tuple(boxes),
        stage=Stage(doc.get("stage", "generated")),
    )


def dumps_boxset(bs: BoxSet, class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS) -> str:
    return json.dumps(boxset_to_dict(bs, class_order), sort_keys=True)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_boxset(bs: BoxSet, path, class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS) -> None:
    atomic_write_text(path, dumps_boxset(bs, class_order))


def load_boxset(path) -> BoxSet:
    return boxset_from_dict(json.loads(Path(path).read_text()))


def save_boxsets_dir(
    sets: Iterable[BoxSet], out_dir, class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for bs in sets:
        save_boxset(bs, out / f"{bs.panorama_id}.json", class_order)


def load_boxsets_dir(in_dir) -> dict[str, BoxSet]:
    sets = {}
    for path in sorted(Path(in_dir).glob("*.json")):
        bs = load_boxset(path)
        sets[bs.panorama_id] = bs
    return sets


def load_detections(path, class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS):
    """COCO results format: a list of {image_id, category_id, bbox, score}."""
    from .metrics import Detection

    names = {cid: name for name, cid in category_ids(class_order).items()}
    raw = json.loads(Path(path).read_text())
    dets = []
    for rec in raw:
        x, y, w, h = rec["bbox"]
        cls = names[rec["category_id"]]
        dets.append(
            Detection(
                image_id=str(rec["image_id"]),
                class_id=cls,
                box=BBox(class_id=cls, x_min=float(x), y_min=float(y),
                         x_max=float(x) + float(w), y_max=float(y) + float(h)),
                score=float(rec["score"]),
            )
        )
    return dets


def save_detections(dets, path, class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS) -> None:
    cats = category_ids(class_order)
    rows = [
        {
            "image_id": d.image_id,
            "category_id": cats[d.class_id],
            "bbox": [d.box.x_min, d.box.y_min, d.box.width, d.box.height],
            "score": d.score,
        }
        for d in dets
    ]
    atomic_write_text(path, json.dumps(rows, sort_keys=True))
