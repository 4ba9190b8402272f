import random

import pytest

from panobox.model import BBox, BoxSet, Stage
from panobox.refine import (
    DEFAULT_NON_BLOCKING,
    RefineConfig,
    merge_duplicates,
    overlap_fraction,
    refine_buildings,
    refine_general,
    refine_pipeline,
    refine_trees,
)


def _box(cls, x0, y0, x1, y1, d, oid, src="city", link=None, meta=None):
    return BBox(cls, x0, y0, x1, y1, object_id=oid, link_id=link,
                distance_m=d, source=src, metadata=meta or {})


def _set(*boxes, stage=Stage.GENERATED):
    return BoxSet("p", 1400, 700, tuple(boxes), stage=stage)


def _coords(b):
    return (b.x_min, b.y_min, b.x_max, b.y_max)


# ---------------------------------------------------------------------------
# overlap_fraction


def test_overlap_fraction_identical_and_disjoint():
    a = _box("tree", 0, 0, 10, 10, 5, "a")
    assert overlap_fraction(a, a) == 1.0
    b = _box("tree", 20, 20, 30, 30, 5, "b")
    assert overlap_fraction(a, b) == 0.0


def test_overlap_fraction_half():
    a = _box("tree", 0, 0, 10, 10, 5, "a")
    b = _box("tree", 5, 0, 20, 10, 5, "b")
    assert overlap_fraction(a, b) == 0.5


def test_overlap_fraction_rejects_zero_area():
    a = BBox("tree", 0, 0, 0, 10, distance_m=1)
    b = _box("tree", 0, 0, 10, 10, 5, "b")
    with pytest.raises(ValueError):
        overlap_fraction(a, b)


# ---------------------------------------------------------------------------
# building rules


def test_building_rule_removes_fully_contained_box():
    bld = _box("building", 100, 100, 600, 600, 10, "b1")
    tree = _box("tree", 200, 200, 400, 400, 30, "t1")
    out = refine_buildings(_set(bld, tree))
    assert [b.object_id for b in out.boxes] == ["b1"]


def test_building_rule_shrinks_partial_overlap_right_side():
    bld = _box("building", 500, 100, 900, 650, 10, "b1")
    sign = _box("traffic_sign", 400, 300, 600, 400, 40, "s1")
    out = refine_buildings(_set(bld, sign))
    sign_out = next(b for b in out.boxes if b.object_id == "s1")
    assert _coords(sign_out) == (400, 300, 500, 400)


def test_building_rule_ignores_farther_building():
    bld = _box("building", 100, 100, 600, 600, 50, "b1")
    sign = _box("traffic_sign", 200, 200, 400, 400, 10, "s1")
    out = refine_buildings(_set(bld, sign))
    assert {b.object_id for b in out.boxes} == {"b1", "s1"}
    sign_out = next(b for b in out.boxes if b.object_id == "s1")
    assert _coords(sign_out) == (200, 200, 400, 400)


def test_building_rule_double_sided_overlap():
    # two nearer buildings cover both sides; the wider covered strip goes first
    left = _box("building", 0, 0, 300, 700, 5, "bl")
    right = _box("building", 520, 0, 900, 700, 6, "br")
    box = _box("trash_container", 200, 100, 600, 200, 30, "t")
    out = refine_buildings(_set(left, right, box))
    t = next(b for b in out.boxes if b.object_id == "t")
    assert _coords(t) == (300, 100, 520, 200)


def test_building_rule_removes_box_shrunk_to_nothing():
    bld = _box("building", 100, 0, 900, 650, 10, "b1")
    # x-range inside the building, sticking out only in y: x-shrink erases it
    sign = _box("traffic_sign", 400, 660, 600, 690, 40, "s1")
    keep = refine_buildings(_set(bld, sign))
    assert {b.object_id for b in keep.boxes} == {"b1", "s1"}  # no y overlap: kept
    sign2 = _box("traffic_sign", 400, 300, 600, 660, 40, "s2")
    out = refine_buildings(_set(bld, sign2))
    assert {b.object_id for b in out.boxes} == {"b1"}


def test_building_rule_linked_pair_full_containment_removes_both():
    bld = _box("building", 0, 0, 1400, 700, 5, "b1")
    l1 = _box("tram", 0, 100, 50, 200, 30, "t1", link="L")
    l2 = _box("tram", 1350, 100, 1400, 200, 30, "t1", link="L")
    out = refine_buildings(_set(bld, l1, l2))
    assert [b.object_id for b in out.boxes] == ["b1"]


def test_building_rule_shrunk_member_unlinks_partner():
    # building hides the left member's full x-range but only part of its y,
    # so the member shrinks away instead of being contained: partner stays
    bld = _box("building", 0, 150, 60, 700, 5, "b1")
    l1 = _box("tram", 0, 100, 50, 200, 30, "t1", link="L")
    l2 = _box("tram", 1350, 100, 1400, 200, 30, "t1a", link="L")
    out = refine_buildings(_set(bld, l1, l2))
    survivors = {b.object_id: b for b in out.boxes}
    assert set(survivors) == {"b1", "t1a"}
    assert survivors["t1a"].link_id is None
    assert survivors["t1a"].x_min == 1350


def test_building_rule_unpinned_member_breaks_link():
    bld = _box("building", 0, 150, 60, 700, 5, "b1")
    l1 = _box("tram", 0, 100, 90, 200, 30, "t1", link="L")   # shrinks to [60, 90]
    l2 = _box("tram", 1350, 100, 1400, 200, 30, "t1a", link="L")
    out = refine_buildings(_set(bld, l1, l2))
    survivors = {b.object_id: b for b in out.boxes}
    assert set(survivors) == {"b1", "t1", "t1a"}
    assert survivors["t1"].link_id is None
    assert survivors["t1a"].link_id is None
    assert _coords(survivors["t1"]) == (60, 100, 90, 200)


# ---------------------------------------------------------------------------
# tree rule


def test_tree_rule_identical_pair_keeps_nearer():
    t1 = _box("tree", 100, 100, 300, 400, 10, "t1")
    t2 = _box("tree", 100, 100, 300, 400, 20, "t2")
    out = refine_trees(_set(t1, t2))
    assert [b.object_id for b in out.boxes] == ["t1"]


def test_tree_rule_25_percent_overlap_kept():
    t1 = _box("tree", 0, 0, 100, 100, 10, "t1")
    t2 = _box("tree", 75, 0, 175, 100, 20, "t2")  # covered 25%
    out = refine_trees(_set(t1, t2))
    assert {b.object_id for b in out.boxes} == {"t1", "t2"}


def test_tree_rule_cascade_unoccludes():
    # A covers B 40%, B covers C 40%, A covers C 10%: B removed, C survives
    a = _box("tree", 0, 0, 100, 100, 5, "a")
    b = _box("tree", 60, 0, 160, 100, 10, "b")
    c = _box("tree", 120, 0, 220, 100, 15, "c")
    assert overlap_fraction(b, a) == pytest.approx(0.4)
    assert overlap_fraction(c, b) == pytest.approx(0.4)
    assert overlap_fraction(c, a) == 0.0
    out = refine_trees(_set(a, b, c))
    assert [x.object_id for x in out.boxes] == ["a", "c"]


def test_tree_rule_ignores_other_classes():
    bld = _box("building", 0, 0, 100, 100, 5, "b")
    t = _box("tree", 0, 0, 100, 100, 10, "t")
    out = refine_trees(_set(bld, t))
    assert {b.object_id for b in out.boxes} == {"b", "t"}


# ---------------------------------------------------------------------------
# merge rule


def test_merge_different_sources_unions_extent_and_metadata():
    a = _box("building", 100, 100, 200, 220, 12, "a", src="city", meta={"value": 500000})
    b = _box("building", 110, 105, 210, 225, 14, "b", src="osm", meta={"levels": 4})
    out = merge_duplicates(_set(a, b), 0.5)
    assert len(out.boxes) == 1
    m = out.boxes[0]
    assert _coords(m) == (100, 100, 210, 225)
    assert m.distance_m == 12
    assert m.object_id == "a"
    assert m.source == "city+osm"
    assert m.metadata == {"value": 500000, "levels": 4}


def test_merge_prefixes_colliding_metadata_keys():
    a = _box("building", 100, 100, 200, 200, 12, "a", src="city", meta={"value": 1})
    b = _box("building", 100, 100, 200, 200, 12, "b", src="osm", meta={"value": 2})
    out = merge_duplicates(_set(a, b), 0.5)
    assert out.boxes[0].metadata == {"city:value": 1, "osm:value": 2}


def test_merge_never_same_source_or_different_class():
    a = _box("building", 100, 100, 200, 200, 12, "a", src="city")
    b = _box("building", 100, 100, 200, 200, 12, "b", src="city")
    assert len(merge_duplicates(_set(a, b), 0.5).boxes) == 2
    c = _box("tree", 100, 100, 200, 200, 12, "c", src="osm")
    assert len(merge_duplicates(_set(a, c), 0.5).boxes) == 2


def test_merge_respects_iou_threshold():
    a = _box("building", 0, 0, 100, 100, 12, "a", src="city")
    b = _box("building", 60, 0, 160, 100, 12, "b", src="osm")  # IoU = 40/160 = 0.25
    assert len(merge_duplicates(_set(a, b), 0.5).boxes) == 2
    assert len(merge_duplicates(_set(a, b), 0.25).boxes) == 1


# ---------------------------------------------------------------------------
# general rule


def test_general_rule_removes_behind_blocking_class():
    bld = _box("building", 100, 100, 600, 600, 10, "b1")
    sign = _box("traffic_sign", 150, 150, 250, 250, 40, "s1")  # 100% covered
    out = refine_general(_set(bld, sign))
    assert [b.object_id for b in out.boxes] == ["b1"]


def test_general_rule_keeps_behind_non_blocking_tree():
    tree = _box("tree", 100, 100, 600, 600, 10, "t1")
    sign = _box("traffic_sign", 150, 150, 250, 250, 40, "s1")
    out = refine_general(_set(tree, sign))
    assert {b.object_id for b in out.boxes} == {"t1", "s1"}


def test_general_rule_keeps_below_threshold():
    bld = _box("building", 100, 0, 170, 100, 10, "b1")
    sign = _box("traffic_sign", 100, 0, 200, 100, 40, "s1")  # covered 70%
    assert overlap_fraction(sign, bld) == pytest.approx(0.7)
    out = refine_general(_set(bld, sign))
    assert {b.object_id for b in out.boxes} == {"b1", "s1"}


def test_general_rule_occluders_are_stage_entry_set():
    # c hides b, b hides a; removing b does not save a (physical occlusion)
    c = _box("building", 0, 0, 100, 100, 5, "c")
    b = _box("traffic_sign", 5, 5, 95, 95, 10, "b")
    a = _box("trash_container", 10, 10, 90, 90, 20, "a")
    out = refine_general(_set(c, b, a))
    assert [x.object_id for x in out.boxes] == ["c"]


# ---------------------------------------------------------------------------
# full pipeline


def test_pipeline_empty_set():
    out = refine_pipeline(_set())
    assert out.stage == Stage.REFINED
    assert out.boxes == ()


def test_pipeline_requires_generated_stage():
    with pytest.raises(ValueError):
        refine_pipeline(_set(stage=Stage.REFINED))


def test_pipeline_non_overlapping_untouched():
    boxes = [
        _box("building", 0, 0, 100, 100, 10, "a"),
        _box("tree", 200, 0, 300, 100, 10, "b"),
        _box("lamppost", 400, 0, 410, 100, 10, "c"),
    ]
    out = refine_pipeline(_set(*boxes))
    assert [(_coords(b), b.object_id) for b in out.boxes] == [
        (_coords(b), b.object_id) for b in boxes
    ]


def constructed_scene() -> BoxSet:
    """Six boxes exercising each rule; the expected output is hand-traced."""
    return _set(
        _box("building", 200, 100, 600, 650, 10, "B1", src="city"),
        _box("building", 190, 110, 590, 645, 10, "B2", src="osm"),
        _box("tree", 650, 200, 850, 600, 5, "T1", src="city"),
        _box("tree", 700, 220, 900, 580, 8, "T2", src="city"),
        _box("advertising_column", 900, 250, 1000, 500, 15, "A1", src="city"),
        _box("traffic_sign", 910, 300, 990, 480, 40, "S2", src="city"),
    )


CONSTRUCTED_EXPECTED = {
    # hand trace: B1 kept; B2 partially behind B1 (tie broken by area, B1
    # nearer) so its right side pulls back to B1's left edge; T2 is 75%
    # behind T1 and drops; merge fuses nothing (post-shrink building IoU is
    # 0, same-source trees); S2 is fully behind the blocking column A1.
    "B1": (200.0, 100.0, 600.0, 650.0),
    "B2": (190.0, 110.0, 200.0, 645.0),
    "T1": (650.0, 200.0, 850.0, 600.0),
    "A1": (900.0, 250.0, 1000.0, 500.0),
}


def test_pipeline_constructed_scene_matches_hand_trace():
    out = refine_pipeline(constructed_scene())
    assert out.stage == Stage.REFINED
    got = {b.object_id: _coords(b) for b in out.boxes}
    assert got == CONSTRUCTED_EXPECTED


def test_pipeline_merge_scene():
    # variant where the merge stage visibly fuses a dual-source lamppost
    scene = _set(
        _box("building", 200, 100, 600, 650, 10, "B1"),
        _box("traffic_sign", 550, 300, 650, 400, 40, "S1"),
        _box("tree", 650, 200, 850, 600, 5, "T1"),
        _box("tree", 700, 220, 900, 580, 8, "T2"),
        _box("lamppost", 1000, 250, 1040, 600, 20, "L1", src="city"),
        _box("lamppost", 1005, 255, 1045, 605, 21, "L2", src="osm"),
    )
    out = refine_pipeline(scene)
    got = {b.object_id: _coords(b) for b in out.boxes}
    assert got == {
        "B1": (200.0, 100.0, 600.0, 650.0),
        "S1": (600.0, 300.0, 650.0, 400.0),  # pulled off the building
        "T1": (650.0, 200.0, 850.0, 600.0),
        "L1": (1000.0, 250.0, 1045.0, 605.0),  # merged union
    }
    merged = next(b for b in out.boxes if b.object_id == "L1")
    assert merged.source == "city+osm"
    assert merged.distance_m == 20


def test_pipeline_determinism():
    a = refine_pipeline(constructed_scene())
    b = refine_pipeline(constructed_scene())
    assert a == b


def _random_scene(rng: random.Random, n: int) -> BoxSet:
    classes = ["building", "tree", "traffic_sign", "lamppost", "trash_container",
               "advertising_column", "bus"]
    boxes = []
    for i in range(n):
        x0 = rng.uniform(0, 1300)
        y0 = rng.uniform(0, 600)
        w = rng.uniform(5, 400)
        h = rng.uniform(5, 300)
        boxes.append(
            _box(
                rng.choice(classes),
                x0, y0, min(1400, x0 + w), min(700, y0 + h),
                rng.uniform(1, 150), f"o{i}",
                src=rng.choice(["city", "osm"]),
            )
        )
    return _set(*boxes)


def test_pipeline_invariants_random_scenes():
    rng = random.Random(11)
    cfg = RefineConfig()
    for _ in range(120):
        out = refine_pipeline(_random_scene(rng, rng.randint(2, 25)), cfg)
        boxes = out.boxes
        assert len(boxes) <= 25
        for a in boxes:
            for b in boxes:
                if a is b:
                    continue
                if b.class_id == "building" and _strictly_nearer(b, a):
                    assert overlap_fraction(a, b) < 1.0
                if (
                    a.class_id == "tree" and b.class_id == "tree"
                    and _strictly_nearer(b, a)
                ):
                    assert overlap_fraction(a, b) <= cfg.tree_overlap_threshold + 1e-9
                if b.class_id not in cfg.non_blocking and _strictly_nearer(b, a):
                    assert overlap_fraction(a, b) <= cfg.general_overlap_threshold + 1e-9


def _strictly_nearer(a, b):
    from panobox.refine import _depth_key

    return _depth_key(a) < _depth_key(b)
