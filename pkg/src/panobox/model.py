"""Shared domain types for panorama auto-annotation.

Conventions used throughout the package:
  - All geospatial coordinates live in one planar metric CRS
    (x meters east, y meters north); distances are Euclidean.
  - Azimuths and headings are degrees clockwise from true north, in [0, 360).
  - Pixel origin is the top-left image corner, x rightward, y downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Union

ClassId = str

_EPS = 1e-9


class GeoPoint(NamedTuple):
    x: float
    y: float


def angular_diff(a: float, b: float) -> float:
    """Signed shortest rotation from bearing b to bearing a, in (-180, 180]."""
    d = math.fmod(a - b, 360.0)
    if d <= -180.0:
        d += 360.0
    elif d > 180.0:
        d -= 360.0
    return d


def normalize_deg(a: float) -> float:
    return a % 360.0


def azimuth_deg(origin: GeoPoint, target: GeoPoint) -> float:
    """Compass bearing from origin to target (degrees clockwise from north)."""
    return math.degrees(math.atan2(target[0] - origin[0], target[1] - origin[1])) % 360.0


class GeometryError(ValueError):
    """Raised for geometry that violates the construction invariants."""


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    # Shared endpoints do not count; collinear overlap of positive length does.
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    if o1 == 0 and o2 == 0 and o3 == 0 and o4 == 0:
        # collinear: check 1-d overlap beyond a single touching point
        if abs(p2[0] - p1[0]) >= abs(p2[1] - p1[1]):
            lo1, hi1 = sorted((p1[0], p2[0]))
            lo2, hi2 = sorted((q1[0], q2[0]))
        else:
            lo1, hi1 = sorted((p1[1], p2[1]))
            lo2, hi2 = sorted((q1[1], q2[1]))
        return min(hi1, hi2) - max(lo1, lo2) > _EPS
    if (o1 * o2 < 0) and (o3 * o4 < 0):
        return True
    return False


@dataclass(frozen=True)
class PointGeometry:
    point: GeoPoint

    def __post_init__(self):
        if not (math.isfinite(self.point[0]) and math.isfinite(self.point[1])):
            raise GeometryError("non-finite point coordinates")


@dataclass(frozen=True)
class Polyline:
    points: tuple[GeoPoint, ...]

    def __post_init__(self):
        pts = tuple(GeoPoint(float(x), float(y)) for x, y in self.points)
        if len(pts) < 2:
            raise GeometryError("polyline needs at least 2 points")
        for a, b in zip(pts, pts[1:]):
            if math.hypot(b[0] - a[0], b[1] - a[1]) <= _EPS:
                raise GeometryError("polyline has a zero-length segment")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Polygon:
    """Simple polygon ring. Stored open (no repeated closing vertex)."""

    ring: tuple[GeoPoint, ...]

    def __post_init__(self):
        pts = [GeoPoint(float(x), float(y)) for x, y in self.ring]
        if len(pts) >= 2 and pts[0] == pts[-1]:
            pts = pts[:-1]
        if len(pts) < 3:
            raise GeometryError("polygon needs at least 3 distinct vertices")
        if len(set(pts)) != len(pts):
            raise GeometryError("polygon has duplicate vertices")
        n = len(pts)
        edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue  # adjacent edges share a vertex by construction
                if _segments_properly_intersect(*edges[i], *edges[j]):
                    raise GeometryError("self-intersecting polygon")
        if abs(self_area := _ring_area(pts)) <= _EPS:
            raise GeometryError("degenerate polygon (zero area)")
        object.__setattr__(self, "ring", tuple(pts))

    @property
    def closed_ring(self) -> tuple[GeoPoint, ...]:
        return self.ring + (self.ring[0],)

    def area(self) -> float:
        return abs(_ring_area(list(self.ring)))

    def centroid(self) -> GeoPoint:
        a2 = 0.0
        cx = cy = 0.0
        pts = self.ring
        n = len(pts)
        for i in range(n):
            x0, y0 = pts[i]
            x1, y1 = pts[(i + 1) % n]
            cross = x0 * y1 - x1 * y0
            a2 += cross
            cx += (x0 + x1) * cross
            cy += (y0 + y1) * cross
        if abs(a2) <= _EPS:
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            return GeoPoint(sum(xs) / n, sum(ys) / n)
        return GeoPoint(cx / (3.0 * a2), cy / (3.0 * a2))


def _ring_area(pts) -> float:
    s = 0.0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


Geometry = Union[PointGeometry, Polyline, Polygon]


@dataclass(frozen=True)
class UrbanObject:
    id: str
    class_id: ClassId
    geometry: Geometry
    source: str = ""
    metadata: Mapping[str, object] = field(default_factory=dict)
    height_override_m: float | None = None
    width_override_m: float | None = None

    def __post_init__(self):
        for name in ("height_override_m", "width_override_m"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0 when present")


@dataclass(frozen=True)
class ClassSpec:
    class_id: ClassId
    width_estimate_m: float
    height_estimate_m: float | None
    non_blocking: bool = False
    height_from_elevation: bool = False


class ClassTableError(ValueError):
    pass


# Per-class width/height estimates in meters. A missing height estimate means
# the class relies on elevation data (tree); non_blocking classes never remove
# boxes behind them during occlusion refinement.
_DEFAULT_SPECS = [
    # (class, width, height, non_blocking, height_from_elevation)
    ("advertising_column", 1.3, 3.2, False, False),
    ("bicycle_path", 4.0, 1.5, True, False),
    ("building", 5.0, 10.0, False, True),
    ("bus", 4.0, 2.5, True, False),
    ("bridge", 4.0, 2.5, True, True),
    ("ferry", 4.0, 3.5, True, False),
    ("high_voltage_pylon", 15.0, 25.0, False, False),
    ("lamppost", 1.0, 6.0, True, False),
    ("park", 5.0, 10.0, True, False),
    ("playground", 7.0, 2.0, False, False),
    ("public_toilet", 1.5, 2.5, False, False),
    ("public_transport_stop", 2.5, 2.0, False, False),
    ("railway_track", 4.0, 1.5, True, False),
    ("sport_facility", 10.0, 3.0, False, False),
    ("traffic_light", 0.5, 2.5, False, False),
    ("traffic_sign", 0.5, 2.5, False, False),
    ("train", 4.0, 4.0, True, False),
    ("tram", 4.0, 2.5, True, False),
    ("trash_container", 1.2, 1.5, False, False),
    ("tree", 5.0, None, True, True),
    ("waterway", 4.0, 1.5, True, False),
    ("windturbine", 30.0, 50.0, False, False),
]

DEFAULT_CLASS_IDS: tuple[ClassId, ...] = tuple(row[0] for row in _DEFAULT_SPECS)


def default_class_table() -> dict[ClassId, ClassSpec]:
    table = {
        cid: ClassSpec(cid, w, h, non_blocking=nb, height_from_elevation=hfe)
        for cid, w, h, nb, hfe in _DEFAULT_SPECS
    }
    validate_class_table(table.values(), required=DEFAULT_CLASS_IDS)
    return table


def validate_class_table(
    specs: Iterable[ClassSpec], required: Iterable[ClassId] = ()
) -> dict[ClassId, ClassSpec]:
    """Check class-table invariants; returns the table keyed by class id."""
    table: dict[ClassId, ClassSpec] = {}
    problems: list[str] = []
    for spec in specs:
        if spec.class_id in table:
            problems.append(f"duplicate class: {spec.class_id}")
            continue
        if not spec.width_estimate_m > 0:
            problems.append(f"invalid width estimate for {spec.class_id}")
        if spec.height_estimate_m is not None and not spec.height_estimate_m > 0:
            problems.append(f"invalid height estimate for {spec.class_id}")
        if spec.height_estimate_m is None and not spec.height_from_elevation:
            problems.append(f"missing height estimate for {spec.class_id}")
        table[spec.class_id] = spec
    missing = [c for c in required if c not in table]
    if missing:
        problems.append("missing classes: " + ", ".join(missing))
    if problems:
        raise ClassTableError("; ".join(problems))
    return table


class Surface(str, Enum):
    LAND = "land"
    WATER = "water"


@dataclass(frozen=True)
class PanoramaMeta:
    id: str
    position: GeoPoint
    heading_deg: float
    timestamp: datetime
    surface: Surface = Surface.LAND
    width_px: int = 1400
    height_px: int = 700
    roll_deg: float = 0.0   # stored only; images are assumed pre-calibrated
    pitch_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading_deg", normalize_deg(float(self.heading_deg)))
        if self.width_px != 2 * self.height_px:
            raise ValueError("equirectangular input requires width_px = 2 * height_px")


class Stage(str, Enum):
    GENERATED = "generated"
    REFINED = "refined"
    HUMAN_ADJUSTED = "human_adjusted"
    HUMAN_VERIFIED = "human_verified"
    GOLD = "gold"


_STAGE_ORDER = {s: i for i, s in enumerate(Stage)}


@dataclass(frozen=True)
class BBox:
    class_id: ClassId
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    object_id: str | None = None
    link_id: str | None = None
    distance_m: float | None = None
    source: str | None = None
    metadata: Mapping[str, object] = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def moved(self, **coords) -> "BBox":
        return replace(self, **coords)


@dataclass(frozen=True)
class BoxSet:
    panorama_id: str
    width_px: int
    height_px: int
    boxes: tuple[BBox, ...]
    stage: Stage = Stage.GENERATED

    def with_boxes(self, boxes: Iterable[BBox]) -> "BoxSet":
        return replace(self, boxes=tuple(boxes))

    def with_stage(self, stage: Stage) -> "BoxSet":
        if _STAGE_ORDER[stage] < _STAGE_ORDER[self.stage]:
            raise ValueError(f"stage cannot move backwards: {self.stage.value} -> {stage.value}")
        return replace(self, stage=stage)


def check_boxset(bs: BoxSet, *, tol: float = 1e-6) -> None:
    """Validate the BoxSet invariants; raises ValueError on the first violation.

    Checks: in-image clamping, positive extent, and the linked-pair contract
    (exactly two boxes per link id, equal heights, pinned to opposite image
    extremities).
    """
    by_link: dict[str, list[BBox]] = {}
    for b in bs.boxes:
        if not (b.x_min < b.x_max and b.y_min < b.y_max):
            raise ValueError(f"{bs.panorama_id}: empty box extent {b}")
        if b.x_min < -tol or b.y_min < -tol or b.x_max > bs.width_px + tol or b.y_max > bs.height_px + tol:
            raise ValueError(f"{bs.panorama_id}: box outside image bounds {b}")
        if b.link_id is not None:
            by_link.setdefault(b.link_id, []).append(b)
    for link_id, members in by_link.items():
        if len(members) != 2:
            raise ValueError(f"{bs.panorama_id}: link {link_id} has {len(members)} members")
        a, b = members
        if abs(a.y_min - b.y_min) > tol or abs(a.y_max - b.y_max) > tol:
            raise ValueError(f"{bs.panorama_id}: link {link_id} members differ in height")
        left = a if a.x_min <= b.x_min else b
        right = b if left is a else a
        if left.x_min > tol or right.x_max < bs.width_px - tol:
            raise ValueError(f"{bs.panorama_id}: link {link_id} not pinned to both image extremities")


def check_panorama_meta(meta: PanoramaMeta) -> None:
    if not (math.isfinite(meta.position[0]) and math.isfinite(meta.position[1])):
        raise ValueError(f"{meta.id}: non-finite position")
    if meta.width_px <= 0 or meta.height_px <= 0:
        raise ValueError(f"{meta.id}: non-positive image dimensions")
