"""Command-line front door for the annotation pipeline.

Subcommands cover the batch workflow end to end: pose filtering, box
generation, refinement, noise analysis, dataset statistics, splits,
oversampling plans, geometry transforms, evaluation and the annotation
service. Every subcommand is a pure function of (inputs, config, seed);
re-running writes byte-identical outputs. Diagnostics go to stderr as
line-delimited JSON.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from . import coco, datasets, ingest, metrics as metrics_mod, noise
from .model import DEFAULT_CLASS_IDS
from .pipeline import GenerateConfig, run_generate
from .refine import RefineConfig, refine_pipeline


def log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def _load_class_map(path):
    if path is None:
        return None
    return {str(k): str(v) for k, v in json.loads(Path(path).read_text()).items()}


def _refine_config(path) -> RefineConfig:
    return RefineConfig.from_file(path) if path else RefineConfig()


@click.group()
def main():
    """GIS-driven bounding-box annotation tooling for street panoramas."""


@main.command("filter")
@click.option("--poses", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--min-sep", default=2.5, show_default=True)
def filter_cmd(poses, out, min_sep):
    """Density-filter panorama poses (most recent wins within min-sep)."""
    all_poses = ingest.load_poses(poses)
    kept = ingest.density_filter(all_poses, min_sep)
    ingest.save_poses(kept, out)
    log("filter", total=len(all_poses), kept=len(kept), min_sep=min_sep)


@main.command()
@click.option("--objects", required=True, type=click.Path(exists=True))
@click.option("--poses", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--dsm", type=click.Path(exists=True))
@click.option("--dtm", type=click.Path(exists=True))
@click.option("--class-map", type=click.Path(exists=True))
@click.option("--radius", default=150.0, show_default=True)
@click.option("--forward-x-fraction", default=0.5, show_default=True)
@click.option("--fallback-height", default=8.0, show_default=True)
@click.option("--refine", "do_refine", is_flag=True, help="Fuse refinement into generation.")
@click.option("--config", "config_path", type=click.Path(exists=True), help="Refinement config (JSON).")
@click.option("--threads", default=1, show_default=True)
def generate(objects, poses, out_dir, dsm, dtm, class_map, radius,
             forward_x_fraction, fallback_height, do_refine, config_path, threads):
    """Generate one COCO-style annotation file per panorama."""
    pose_list = ingest.load_poses(poses)
    cfg = GenerateConfig(
        radius_m=radius,
        forward_x_fraction=forward_x_fraction,
        fallback_height_m=fallback_height,
    )
    n = run_generate(
        pose_list,
        objects,
        out_dir,
        class_map=_load_class_map(class_map),
        dsm_path=dsm,
        dtm_path=dtm,
        config=cfg,
        refine_config=_refine_config(config_path) if do_refine else None,
        threads=threads,
    )
    log("generate", panoramas=n, out=str(out_dir), refined=do_refine)


@main.command()
@click.option("--boxes", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
def refine(in_dir, out_dir, config_path):
    """Apply the occlusion refinement rules to generated box sets."""
    cfg = _refine_config(config_path)
    sets = coco.load_boxsets_dir(in_dir)
    refined = [refine_pipeline(bs, cfg) for bs in sets.values()]
    coco.save_boxsets_dir(refined, out_dir)
    log("refine", panoramas=len(refined), out=str(out_dir))


@main.command("noise")
@click.option("--noisy", required=True, type=click.Path(exists=True))
@click.option("--clean", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def noise_cmd(noisy, clean, out):
    """Compare a noisy box collection against a clean reference."""
    noisy_sets = coco.load_boxsets_dir(noisy)
    clean_sets = coco.load_boxsets_dir(clean)
    report = noise.noise_report(noisy_sets, clean_sets)
    labels = noise.label_report(noisy_sets, clean_sets, DEFAULT_CLASS_IDS)
    noise.save_report(report, labels, out)
    _write_noise_csvs(report, Path(out))
    log("noise", images=len(noisy_sets), out=str(out))


def _write_noise_csvs(report: noise.MatchReport, out_path: Path) -> None:
    overlap_csv = out_path.with_name(out_path.stem + "_overlap.csv")
    with open(overlap_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["class", "n_noisy", "n_clean", "n_matched",
             "matched_noisy_fraction", "matched_clean_fraction",
             "iou_median", "giou_median"]
        )
        for cid, st in sorted(report.per_class.items()):
            iou_q = st.quantiles(st.ious)
            giou_q = st.quantiles(st.gious)
            w.writerow(
                [cid, st.n_noisy, st.n_clean, st.n_matched,
                 st.matched_noisy_fraction,
                 "" if st.matched_clean_fraction is None else st.matched_clean_fraction,
                 "" if iou_q is None else iou_q["median"],
                 "" if giou_q is None else giou_q["median"]]
            )
    shifts_csv = out_path.with_name(out_path.stem + "_shifts.csv")
    with open(shifts_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dx_min", "dy_min", "dx_max", "dy_max"])
        rows = zip(*(report.shifts[k] for k in ("dx_min", "dy_min", "dx_max", "dy_max")))
        for row in rows:
            w.writerow(row)


@main.command()
@click.option("--boxes", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--top-band", default=50.0, show_default=True)
@click.option("--bottom-band", default=150.0, show_default=True)
def stats(in_dir, out, top_band, bottom_band):
    """Dataset statistics: class counts, size buckets, band fractions."""
    sets = coco.load_boxsets_dir(in_dir)
    st = datasets.dataset_stats(
        sets.values(), top_band_px=top_band, bottom_band_px=bottom_band
    )
    coco.atomic_write_text(out, json.dumps(st.to_json_dict(), sort_keys=True, indent=1))
    csv_path = Path(out).with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "instances", "pct_small", "pct_medium", "pct_large",
                    "frac_top_band", "frac_bottom_band"])
        for cid in sorted(st.instances_per_class):
            pct = st.size_percentages(cid)
            band = st.band_fractions(cid)
            w.writerow([cid, st.instances_per_class[cid], pct["small"], pct["medium"],
                        pct["large"], band["top"], band["bottom"]])
    log("stats", images=st.n_images, out=str(out))


@main.command()
@click.option("--poses", required=True, type=click.Path(exists=True))
@click.option("--neighbourhoods", "nb_path", required=True, type=click.Path(exists=True),
              help="JSON map image_id -> neighbourhood id.")
@click.option("--out", required=True, type=click.Path())
@click.option("--train", default=0.8, show_default=True)
@click.option("--val", default=0.1, show_default=True)
@click.option("--test", default=0.1, show_default=True)
@click.option("--boxes", "boxes_dir", type=click.Path(exists=True),
              help="Box directory for class presence (needed with --required-classes).")
@click.option("--required-classes", "req_path", type=click.Path(exists=True),
              help="JSON map split -> [class ids] that must be present.")
@click.option("--seed", default=0, show_default=True)
def split(poses, nb_path, out, train, val, test, boxes_dir, req_path, seed):
    """Assign whole neighbourhoods to train/val/test splits."""
    pose_list = ingest.load_poses(poses)
    neighbourhoods = json.loads(Path(nb_path).read_text())
    image_classes = None
    if boxes_dir:
        image_classes = {
            pid: sorted({b.class_id for b in bs.boxes})
            for pid, bs in coco.load_boxsets_dir(boxes_dir).items()
        }
    required = json.loads(Path(req_path).read_text()) if req_path else None
    assignment = datasets.group_split(
        pose_list,
        neighbourhoods,
        {"train": train, "val": val, "test": test},
        required_classes=required,
        image_classes=image_classes,
        seed=seed,
    )
    coco.atomic_write_text(out, json.dumps(assignment.to_json_dict(), sort_keys=True, indent=1))
    sizes = {s: len(assignment.images_in(s)) for s in ("train", "val", "test")}
    log("split", out=str(out), **sizes)


@main.command()
@click.option("--boxes", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--t", "t_param", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def sample(in_dir, t_param, seed, out):
    """Repeat-factor oversampling plan from per-image class presence."""
    sets = coco.load_boxsets_dir(in_dir)
    image_classes = {pid: sorted({b.class_id for b in bs.boxes}) for pid, bs in sets.items()}
    plan = datasets.repeat_factors(image_classes, t=t_param, seed=seed)
    coco.atomic_write_text(out, json.dumps(plan.to_json_dict(), sort_keys=True, indent=1))
    log("sample", images=len(image_classes), epoch=len(plan.epoch), out=str(out))


@main.command()
@click.option("--boxes", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["pad", "tiles"]), default="pad", show_default=True)
@click.option("--pad", default=25.0, show_default=True)
@click.option("--min-dup-width", default=20.0, show_default=True)
@click.option("--crop-bottom", default=150.0, show_default=True)
@click.option("--top-crop", default=50, show_default=True)
def transform(in_dir, out_dir, mode, pad, min_dup_width, crop_bottom, top_crop):
    """Circularly pad box sets for detection, or emit classification tiles."""
    sets = coco.load_boxsets_dir(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "pad":
        padded = [
            datasets.circular_pad(bs, pad, min_dup_width, crop_bottom)
            for bs in sets.values()
        ]
        coco.save_boxsets_dir(padded, out)
    else:
        for pid, bs in sorted(sets.items()):
            padded = datasets.circular_pad(bs, pad, min_dup_width, crop_bottom)
            tiles = datasets.classification_tiles(padded, top_crop_px=top_crop)
            doc = [
                {
                    "index": t.index,
                    "x_offset": t.x_offset,
                    "window": list(t.window),
                    "output_size": list(t.output_size),
                    "positive_classes": sorted(t.positive_classes),
                }
                for t in tiles
            ]
            coco.atomic_write_text(out / f"{pid}.tiles.json", json.dumps(doc, sort_keys=True))
    log("transform", images=len(sets), mode=mode, out=str(out_dir))


@main.command("eval")
@click.option("--dets", required=True, type=click.Path(exists=True))
@click.option("--truth", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--fscore-threshold", default=0.5, show_default=True,
              help="Score cutoff when deriving image labels from detections.")
def eval_cmd(dets, truth, out, fscore_threshold):
    """Detection mAP / recall@100 plus image-label weighted F-score."""
    detections = coco.load_detections(dets)
    truth_sets = coco.load_boxsets_dir(truth)
    result = metrics_mod.coco_map(detections, truth_sets)
    recall100 = metrics_mod.recall_at_k(detections, truth_sets, k=100)
    pred_labels = {pid: set() for pid in truth_sets}
    for d in detections:
        if d.score >= fscore_threshold and d.image_id in pred_labels:
            pred_labels[d.image_id].add(d.class_id)
    true_labels = {pid: {b.class_id for b in bs.boxes} for pid, bs in truth_sets.items()}
    fscore = metrics_mod.weighted_fscore(pred_labels, true_labels, DEFAULT_CLASS_IDS)
    doc = {
        "map": result["map"],
        "map50": result.get("map50"),
        "recall@100": recall100,
        "per_class_ap": result["per_class"],
        "weighted_f": fscore["weighted_f"],
        "per_class_f": {c: v["f"] for c, v in fscore["per_class"].items()},
    }
    coco.atomic_write_text(out, json.dumps(doc, sort_keys=True, indent=1))
    with open(Path(out).with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "ap", "f"])
        for c in sorted(set(doc["per_class_ap"]) | set(doc["per_class_f"])):
            w.writerow([c, doc["per_class_ap"].get(c, ""), doc["per_class_f"].get(c, "")])
    log("eval", out=str(out), map=doc["map"], recall100=recall100)


@main.command()
@click.option("--boxes", "boxes_dir", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--images", "images_dir", type=click.Path(exists=True))
@click.option("--neighbourhoods", "nb_path", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--batch-size", default=5, show_default=True)
@click.option("--gold-threshold", default=0.4, show_default=True)
@click.option("--class-order", "class_order_path", type=click.Path(exists=True),
              help="JSON list fixing the per-class verification order.")
@click.option("--seed", default=0, show_default=True)
def serve(boxes_dir, gold_dir, data_dir, images_dir, nb_path, host, port,
          batch_size, gold_threshold, class_order_path, seed):
    """Run the annotation/verification HTTP service."""
    import uvicorn

    from .service import AnnotationBackend, create_app

    published = coco.load_boxsets_dir(boxes_dir)
    gold = coco.load_boxsets_dir(gold_dir)
    neighbourhoods = json.loads(Path(nb_path).read_text()) if nb_path else None
    class_order = (
        json.loads(Path(class_order_path).read_text())
        if class_order_path
        else DEFAULT_CLASS_IDS
    )
    backend = AnnotationBackend(
        published,
        gold,
        data_dir,
        class_order=class_order,
        batch_size=batch_size,
        gold_threshold=gold_threshold,
        neighbourhoods=neighbourhoods,
        seed=seed,
        images_dir=images_dir,
    )
    app = create_app(backend)
    log("serve", host=host, port=port, images=len(published), gold=len(gold))
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
