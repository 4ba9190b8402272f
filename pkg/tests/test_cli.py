import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from panobox.cli import main
from panobox.coco import load_boxsets_dir, save_detections
from panobox.metrics import Detection
from panobox.model import BBox


@pytest.fixture()
def workspace(tmp_path):
    objects = {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[-10, 30], [10, 30], [10, 50], [-10, 50], [-10, 30]]],
                },
                "properties": {"class": "building", "value": 500000, "source": "city"},
            },
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [5, 20]},
                "properties": {"class": "lamppost", "source": "city"},
            },
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [-12, 25]},
                "properties": {"class": "tree", "source": "city"},
            },
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[-60, 60], [60, 80]]},
                "properties": {"class": "waterway", "source": "osm"},
            },
        ],
    }
    (tmp_path / "objects.json").write_text(json.dumps(objects))
    header = "ncols 40\nnrows 40\nxllcorner -20\nyllcorner 20\ncellsize 1.0\nnodata_value -9999\n"
    dsm_rows = "\n".join(" ".join("14.0" for _ in range(40)) for _ in range(40))
    dtm_rows = "\n".join(" ".join("2.0" for _ in range(40)) for _ in range(40))
    (tmp_path / "dsm.asc").write_text(header + dsm_rows + "\n")
    (tmp_path / "dtm.asc").write_text(header + dtm_rows + "\n")
    poses = [
        {"id": "pa", "x": 0.0, "y": 0.0, "heading_deg": 0.0,
         "timestamp_iso8601": "2019-05-01T10:00:00", "surface": "land",
         "width_px": 1400, "height_px": 700, "roll_deg": 0.0, "pitch_deg": 0.0},
        {"id": "pb", "x": 1.0, "y": 0.0, "heading_deg": 90.0,
         "timestamp_iso8601": "2016-05-01T10:00:00", "surface": "land",
         "width_px": 1400, "height_px": 700, "roll_deg": 0.0, "pitch_deg": 0.0},
        {"id": "pc", "x": 40.0, "y": 5.0, "heading_deg": 180.0,
         "timestamp_iso8601": "2018-05-01T10:00:00", "surface": "land",
         "width_px": 1400, "height_px": 700, "roll_deg": 0.0, "pitch_deg": 0.0},
    ]
    (tmp_path / "poses.jsonl").write_text("\n".join(json.dumps(p) for p in poses) + "\n")
    return tmp_path


def _run(*args):
    runner = CliRunner()
    result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def test_filter_drops_close_older_pose(workspace):
    out = workspace / "kept.jsonl"
    _run("filter", "--poses", workspace / "poses.jsonl", "--out", out)
    ids = [json.loads(line)["id"] for line in out.read_text().splitlines()]
    assert ids == ["pa", "pc"]  # pb is 1 m from pa and older


def test_generate_writes_one_file_per_pano(workspace):
    out_dir = workspace / "boxes"
    _run(
        "generate", "--objects", workspace / "objects.json",
        "--poses", workspace / "poses.jsonl",
        "--dsm", workspace / "dsm.asc", "--dtm", workspace / "dtm.asc",
        "--out", out_dir,
    )
    sets = load_boxsets_dir(out_dir)
    assert set(sets) == {"pa", "pb", "pc"}
    pa = sets["pa"]
    assert pa.stage.value == "generated"
    classes = {b.class_id for b in pa.boxes}
    assert {"building", "lamppost", "tree", "waterway"} <= classes
    bld = next(b for b in pa.boxes if b.class_id == "building")
    assert bld.metadata["value"] == 500000
    # elevation-derived height (12 m) beats the 10 m class estimate:
    # top edge must be above where a 10 m building would project
    assert bld.distance_m == 30.0


def test_generate_then_refine_equals_fused(workspace):
    gen = workspace / "gen"
    ref = workspace / "ref"
    fused = workspace / "fused"
    _run("generate", "--objects", workspace / "objects.json",
         "--poses", workspace / "poses.jsonl", "--out", gen)
    _run("refine", "--boxes", gen, "--out", ref)
    _run("generate", "--objects", workspace / "objects.json",
         "--poses", workspace / "poses.jsonl", "--out", fused, "--refine")
    a = {p.name: p.read_bytes() for p in sorted(Path(ref).glob("*.json"))}
    b = {p.name: p.read_bytes() for p in sorted(Path(fused).glob("*.json"))}
    assert a == b


def test_generate_deterministic_reruns(workspace):
    out1 = workspace / "run1"
    out2 = workspace / "run2"
    for out in (out1, out2):
        _run("generate", "--objects", workspace / "objects.json",
             "--poses", workspace / "poses.jsonl", "--out", out, "--refine")
    files1 = {p.name: p.read_bytes() for p in sorted(out1.glob("*.json"))}
    files2 = {p.name: p.read_bytes() for p in sorted(out2.glob("*.json"))}
    assert files1 == files2


def test_noise_identical_dirs_all_perfect(workspace):
    gen = workspace / "gen"
    _run("generate", "--objects", workspace / "objects.json",
         "--poses", workspace / "poses.jsonl", "--out", gen, "--refine")
    report_path = workspace / "report.json"
    _run("noise", "--noisy", gen, "--clean", gen, "--out", report_path)
    doc = json.loads(report_path.read_text())
    for cls in doc["overlap"]["per_class"].values():
        assert cls["matched_noisy_fraction"] == 1.0
        assert cls["matched_clean_fraction"] == 1.0
        assert all(v == 1.0 for v in cls["iou"])
    assert all(v == 1.0 for v in doc["labels"]["image_accuracy"].values())
    assert (workspace / "report_overlap.csv").exists()
    assert (workspace / "report_shifts.csv").exists()


def test_stats_and_sample_and_transform(workspace):
    gen = workspace / "gen"
    _run("generate", "--objects", workspace / "objects.json",
         "--poses", workspace / "poses.jsonl", "--out", gen, "--refine")
    stats_path = workspace / "stats.json"
    _run("stats", "--boxes", gen, "--out", stats_path)
    doc = json.loads(stats_path.read_text())
    assert doc["n_images"] == 3
    assert stats_path.with_suffix(".csv").exists()

    plan_path = workspace / "plan.json"
    _run("sample", "--boxes", gen, "--out", plan_path, "--seed", 5)
    plan = json.loads(plan_path.read_text())
    assert set(plan["image_repeat"]) == {"pa", "pb", "pc"}
    assert all(v >= 1.0 for v in plan["image_repeat"].values())

    padded_dir = workspace / "padded"
    _run("transform", "--boxes", gen, "--out", padded_dir, "--mode", "pad")
    padded = load_boxsets_dir(padded_dir)
    assert all(bs.width_px == 1450 and bs.height_px == 550 for bs in padded.values())

    tiles_dir = workspace / "tiles"
    _run("transform", "--boxes", gen, "--out", tiles_dir, "--mode", "tiles")
    tiles = json.loads((tiles_dir / "pa.tiles.json").read_text())
    assert [t["x_offset"] for t in tiles] == [0, 475, 950]


def test_split_assigns_whole_neighbourhoods(workspace):
    nb_path = workspace / "nb.json"
    nb_path.write_text(json.dumps({"pa": "n0", "pb": "n0", "pc": "n1"}))
    out = workspace / "split.json"
    _run("split", "--poses", workspace / "poses.jsonl", "--neighbourhoods", nb_path,
         "--out", out, "--train", 0.5, "--val", 0.25, "--test", 0.25, "--seed", 2)
    doc = json.loads(out.read_text())
    assert doc["by_image"]["pa"] == doc["by_image"]["pb"]


def test_eval_produces_metrics(workspace):
    gen = workspace / "gen"
    _run("generate", "--objects", workspace / "objects.json",
         "--poses", workspace / "poses.jsonl", "--out", gen, "--refine")
    truth = load_boxsets_dir(gen)
    dets = []
    for pid, bs in truth.items():
        for b in bs.boxes:
            dets.append(Detection(pid, b.class_id,
                                  BBox(b.class_id, b.x_min, b.y_min, b.x_max, b.y_max), 0.9))
    dets_path = workspace / "dets.json"
    save_detections(dets, dets_path)
    out = workspace / "metrics.json"
    _run("eval", "--dets", dets_path, "--truth", gen, "--out", out)
    doc = json.loads(out.read_text())
    assert doc["map"] == pytest.approx(1.0)
    assert doc["recall@100"] == pytest.approx(1.0)
    assert doc["weighted_f"] == pytest.approx(1.0)
    assert out.with_suffix(".csv").exists()
