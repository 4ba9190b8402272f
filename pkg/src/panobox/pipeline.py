"""End-to-end box generation for panoramas, with optional multiprocessing."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .geometry import CameraInsideObject, measure, query_radius
from .ingest import ElevationGrid, ObjectStore
from .model import BoxSet, ClassId, ClassSpec, PanoramaMeta, Stage, default_class_table
from .projection import CameraModel, DegenerateExtent, project_box


@dataclass(frozen=True)
class GenerateConfig:
    radius_m: float = 150.0
    forward_x_fraction: float = 0.5
    fallback_height_m: float = 8.0


def generate_for_panorama(
    pano: PanoramaMeta,
    store: ObjectStore,
    specs: Mapping[ClassId, ClassSpec] | None = None,
    dsm: ElevationGrid | None = None,
    dtm: ElevationGrid | None = None,
    config: GenerateConfig = GenerateConfig(),
) -> BoxSet:
    """Query, measure and project every object near one panorama."""
    specs = specs if specs is not None else default_class_table()
    cm = CameraModel.for_panorama(pano, config.forward_x_fraction)
    boxes = []
    for obj in query_radius(store, pano.position, config.radius_m):
        try:
            m = measure(
                obj,
                pano.position,
                specs,
                dsm,
                dtm,
                radius_m=config.radius_m,
                fallback_height_m=config.fallback_height_m,
            )
            boxes.extend(project_box(cm, m))
        except (CameraInsideObject, DegenerateExtent):
            continue
    return BoxSet(
        panorama_id=pano.id,
        width_px=pano.width_px,
        height_px=pano.height_px,
        boxes=tuple(boxes),
        stage=Stage.GENERATED,
    )


# Worker-side state for the process pool: loaded once per worker so large
# stores and grids are not pickled per task.
_WORKER: dict = {}


def _init_worker(objects_path, class_map, dsm_path, dtm_path, config, refine_config):
    from . import ingest

    _WORKER["store"] = ingest.load_objects(objects_path, class_map)
    _WORKER["dsm"] = ingest.load_grid(dsm_path) if dsm_path else None
    _WORKER["dtm"] = ingest.load_grid(dtm_path) if dtm_path else None
    _WORKER["specs"] = default_class_table()
    _WORKER["config"] = config
    _WORKER["refine_config"] = refine_config


def _run_batch(panos: Sequence[PanoramaMeta], out_dir) -> int:
    from .coco import save_boxset
    from .refine import refine_pipeline

    n = 0
    for pano in panos:
        bs = generate_for_panorama(
            pano,
            _WORKER["store"],
            _WORKER["specs"],
            _WORKER["dsm"],
            _WORKER["dtm"],
            _WORKER["config"],
        )
        if _WORKER["refine_config"] is not None:
            bs = refine_pipeline(bs, _WORKER["refine_config"])
        save_boxset(bs, f"{out_dir}/{bs.panorama_id}.json")
        n += 1
    return n


def run_generate(
    poses: Sequence[PanoramaMeta],
    objects_path,
    out_dir,
    *,
    class_map=None,
    dsm_path=None,
    dtm_path=None,
    config: GenerateConfig = GenerateConfig(),
    refine_config=None,
    threads: int = 1,
) -> int:
    """Generate (and optionally refine) one annotation file per panorama."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    if threads <= 1:
        _init_worker(objects_path, class_map, dsm_path, dtm_path, config, refine_config)
        try:
            return _run_batch(poses, out_dir)
        finally:
            _WORKER.clear()
    chunk = max(1, (len(poses) + threads * 4 - 1) // (threads * 4))
    batches = [poses[i : i + chunk] for i in range(0, len(poses), chunk)]
    total = 0
    with ProcessPoolExecutor(
        max_workers=threads,
        initializer=_init_worker,
        initargs=(objects_path, class_map, dsm_path, dtm_path, config, refine_config),
    ) as pool:
        for n in pool.map(_run_batch, batches, [out_dir] * len(batches)):
            total += n
    return total
