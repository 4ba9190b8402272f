"""Real-world object measurements as seen from a camera position.

For every object near a panorama this module derives the minimum
camera-object distance, the apparent real-world width, the object height and
the azimuth interval the object subtends, which is everything the projection
step needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .model import (
    ClassId,
    ClassSpec,
    GeoPoint,
    Geometry,
    PointGeometry,
    Polygon,
    Polyline,
    UrbanObject,
    angular_diff,
    azimuth_deg,
)

_EPS = 1e-9


class CameraInsideObject(Exception):
    """Camera lies inside (or on) the object footprint; the object is skipped."""


class DegenerateClip(Exception):
    """Polyline clipped to the query disk collapses to a single point."""

    def __init__(self, point: GeoPoint):
        super().__init__("degenerate polyline clip")
        self.point = point


@dataclass(frozen=True)
class Measured3D:
    object_id: str
    class_id: ClassId
    distance_m: float
    width_m: float
    height_m: float
    azimuth_center_deg: float
    azimuth_left_deg: float | None = None
    azimuth_right_deg: float | None = None
    source: str = ""
    metadata: Mapping[str, object] = field(default_factory=dict)


def point_segment_distance(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> float:
    ax, ay = a
    dx = b[0] - ax
    dy = b[1] - ay
    seg2 = dx * dx + dy * dy
    if seg2 <= _EPS * _EPS:
        return math.hypot(p[0] - ax, p[1] - ay)
    t = ((p[0] - ax) * dx + (p[1] - ay) * dy) / seg2
    t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def polygon_contains(poly: Polygon, p: GeoPoint) -> bool:
    """Ray-cast containment; points on the boundary count as inside."""
    x, y = p
    ring = poly.ring
    n = len(ring)
    inside = False
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        if point_segment_distance(p, ring[i], ring[(i + 1) % n]) <= _EPS:
            return True
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if xc > x:
                inside = not inside
    return inside


def min_distance(geom: Geometry, cam: GeoPoint) -> float:
    """Euclidean distance from the camera to the nearest point of the geometry.

    Raises CameraInsideObject when the camera lies inside a polygon (or on
    its boundary), since a zero or interior distance cannot be projected.
    """
    if isinstance(geom, PointGeometry):
        return math.hypot(geom.point[0] - cam[0], geom.point[1] - cam[1])
    if isinstance(geom, Polyline):
        return min(
            point_segment_distance(cam, a, b)
            for a, b in zip(geom.points, geom.points[1:])
        )
    ring = geom.ring
    n = len(ring)
    d = min(
        point_segment_distance(cam, ring[i], ring[(i + 1) % n]) for i in range(n)
    )
    if d <= _EPS or polygon_contains(geom, cam):
        raise CameraInsideObject()
    return d


def geometry_disk_distance(geom: Geometry, cam: GeoPoint) -> float:
    """Distance used by radius queries: 0 when the camera is inside a polygon."""
    if isinstance(geom, Polygon):
        ring = geom.ring
        n = len(ring)
        d = min(
            point_segment_distance(cam, ring[i], ring[(i + 1) % n]) for i in range(n)
        )
        if polygon_contains(geom, cam):
            return 0.0
        return d
    try:
        return min_distance(geom, cam)
    except CameraInsideObject:  # pragma: no cover - polygons handled above
        return 0.0


def query_radius(store, cam: GeoPoint, radius: float = 150.0) -> list:
    """All objects whose geometry intersects the closed disk around cam."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    return store.query_radius(cam, radius)


def _sight_blocked(cam: GeoPoint, v: GeoPoint, ring) -> bool:
    # The segment cam->v must meet the boundary only at v itself.
    cx, cy = cam
    dx = v[0] - cx
    dy = v[1] - cy
    n = len(ring)
    for i in range(n):
        a = ring[i]
        b = ring[(i + 1) % n]
        ex = b[0] - a[0]
        ey = b[1] - a[1]
        denom = dx * ey - dy * ex
        acx = a[0] - cx
        acy = a[1] - cy
        if abs(denom) > _EPS:
            t = (acx * ey - acy * ex) / denom
            u = (acx * dy - acy * dx) / denom
            if -1e-9 <= u <= 1.0 + 1e-9 and 1e-9 < t < 1.0 - 1e-9:
                return True
        else:
            # parallel; collinear only if a lies on the sight line
            if abs(acx * dy - acy * dx) <= _EPS * max(1.0, abs(dx) + abs(dy)):
                seg2 = dx * dx + dy * dy
                if seg2 <= _EPS:
                    continue
                ta = (acx * dx + acy * dy) / seg2
                tb = ((b[0] - cx) * dx + (b[1] - cy) * dy) / seg2
                lo, hi = min(ta, tb), max(ta, tb)
                if min(hi, 1.0 - 1e-9) - max(lo, 1e-9) > 1e-9:
                    return True
    return False


def visible_vertices(poly: Polygon, cam: GeoPoint) -> list[int]:
    ring = poly.ring
    return [i for i, v in enumerate(ring) if not _sight_blocked(cam, v, ring)]


def _order_interval(
    az_a: float, az_b: float, population: Sequence[float] = ()
) -> tuple[float, float]:
    """Order two azimuths so the clockwise interval left->right covers the object.

    The interval containing more of the population bearings (other visible
    points of the object) wins; with no strict-interior witnesses the
    narrower (<=180 degree) interval is used.
    """
    tol = 1e-9
    span_ab = (az_b - az_a) % 360.0
    in_ab = in_ba = 0
    for az in population:
        rel = (az - az_a) % 360.0
        if tol < rel < span_ab - tol:
            in_ab += 1
        elif span_ab + tol < rel < 360.0 - tol:
            in_ba += 1
    if in_ab != in_ba:
        return (az_a, az_b) if in_ab > in_ba else (az_b, az_a)
    if span_ab <= 180.0:
        return az_a, az_b
    return az_b, az_a


def visible_width_polygon(poly: Polygon, cam: GeoPoint) -> tuple[float, float, float]:
    """Width and tangent azimuths of a polygon as seen from cam.

    Among boundary vertices with clear line of sight, picks the pair
    subtending the largest angle at the camera; the width is the straight
    distance between the two picked vertices. Ties prefer the pair closer to
    the camera. Returns (width_m, azimuth_left_deg, azimuth_right_deg) with
    the clockwise interval left->right covering the polygon's near side.
    """
    if polygon_contains(poly, cam):
        raise CameraInsideObject()
    ring = poly.ring
    vis = visible_vertices(poly, cam)
    if len(vis) < 2:
        raise CameraInsideObject()  # pathological; treat as unprojectable
    az = {i: azimuth_deg(cam, ring[i]) for i in vis}
    dist = {i: math.hypot(ring[i][0] - cam[0], ring[i][1] - cam[1]) for i in vis}
    best = None
    best_key = None
    for ii, i in enumerate(vis):
        for j in vis[ii + 1 :]:
            angle = abs(angular_diff(az[i], az[j]))
            key = (-angle, dist[i] + dist[j], i, j)
            if best_key is None or key < best_key:
                best_key = key
                best = (i, j)
    i, j = best
    width = math.hypot(ring[i][0] - ring[j][0], ring[i][1] - ring[j][1])
    left, right = _order_interval(az[i], az[j], [az[k] for k in vis if k not in (i, j)])
    return width, left, right


def clip_polyline_to_disk(points, center: GeoPoint, radius: float) -> list[GeoPoint]:
    """Points of the polyline traversal that lie within the disk, in order.

    Entry/exit points on the circle are inserted; portions outside the disk
    are dropped. Consecutive duplicates are collapsed.
    """
    cx, cy = center
    r2 = radius * radius

    def inside(p):
        dx = p[0] - cx
        dy = p[1] - cy
        return dx * dx + dy * dy <= r2 + 1e-7

    out: list[GeoPoint] = []

    def push(p):
        if not out or math.hypot(out[-1][0] - p[0], out[-1][1] - p[1]) > _EPS:
            out.append(GeoPoint(p[0], p[1]))

    for a, b in zip(points, points[1:]):
        dx = b[0] - a[0]
        dy = b[1] - a[1]
        fx = a[0] - cx
        fy = a[1] - cy
        qa = dx * dx + dy * dy
        qb = 2.0 * (fx * dx + fy * dy)
        qc = fx * fx + fy * fy - r2
        ts: list[float] = []
        disc = qb * qb - 4.0 * qa * qc
        if disc > 0 and qa > _EPS:
            s = math.sqrt(disc)
            for t in ((-qb - s) / (2 * qa), (-qb + s) / (2 * qa)):
                if 0.0 < t < 1.0:
                    ts.append(t)
        ts.sort()
        if inside(a):
            push(a)
        for t in ts:
            push(GeoPoint(a[0] + t * dx, a[1] + t * dy))
    last = points[-1]
    if inside(last):
        push(last)
    return out


def visible_width_polyline(
    line: Polyline, cam: GeoPoint, radius: float = 150.0
) -> tuple[float, float, float]:
    """Width between the endpoints of the polyline part inside the disk.

    Raises DegenerateClip when the clipped part collapses to one point and
    ValueError when the polyline misses the disk entirely.
    """
    clipped = clip_polyline_to_disk(line.points, cam, radius)
    if not clipped:
        raise ValueError("polyline does not intersect the query disk")
    first, last = clipped[0], clipped[-1]
    width = math.hypot(last[0] - first[0], last[1] - first[1])
    if width <= _EPS:
        raise DegenerateClip(first)
    az_a = azimuth_deg(cam, first)
    az_b = azimuth_deg(cam, last)
    population = [
        azimuth_deg(cam, p)
        for p in clipped[1:-1]
        if math.hypot(p[0] - cam[0], p[1] - cam[1]) > _EPS
    ]
    left, right = _order_interval(az_a, az_b, population)
    return width, left, right


def _angular_midpoint(az_left: float, az_right: float) -> float:
    return (az_left + ((az_right - az_left) % 360.0) / 2.0) % 360.0


def representative_point(geom: Geometry) -> GeoPoint:
    if isinstance(geom, PointGeometry):
        return geom.point
    if isinstance(geom, Polygon):
        return geom.centroid()
    pts = geom.points
    return pts[len(pts) // 2]


def measure(
    obj: UrbanObject,
    cam: GeoPoint,
    specs: Mapping[ClassId, ClassSpec],
    dsm=None,
    dtm=None,
    *,
    radius_m: float = 150.0,
    fallback_height_m: float = 8.0,
) -> Measured3D:
    """Derive distance, width, height and azimuths for one object.

    Width comes from the geometry when it permits (polygon tangent vertices,
    clipped polyline endpoints), otherwise from the per-object override, then
    the class estimate. Height prefers the per-object override, then
    DSM-DTM elevation data for classes flagged for it, then the class
    estimate, then the configured fallback. Raises CameraInsideObject when
    the object cannot be measured from this camera position.
    """
    try:
        spec = specs[obj.class_id]
    except KeyError:
        raise ValueError(f"unregistered class: {obj.class_id}") from None

    distance = min_distance(obj.geometry, cam)
    if distance <= _EPS:
        raise CameraInsideObject()

    az_left = az_right = None
    width: float | None = None
    az_center: float | None = None
    geom = obj.geometry
    if isinstance(geom, Polygon):
        width, az_left, az_right = visible_width_polygon(geom, cam)
        az_center = _angular_midpoint(az_left, az_right)
    elif isinstance(geom, Polyline):
        try:
            width, az_left, az_right = visible_width_polyline(geom, cam, radius_m)
            az_center = _angular_midpoint(az_left, az_right)
        except DegenerateClip as clip:
            az_center = azimuth_deg(cam, clip.point)
    if width is None or width <= _EPS:
        width = obj.width_override_m if obj.width_override_m else spec.width_estimate_m
        az_left = az_right = None
    if az_center is None:
        az_center = azimuth_deg(cam, representative_point(geom))

    height: float | None = obj.height_override_m
    if height is None and spec.height_from_elevation and dsm is not None and dtm is not None:
        from .ingest import NoElevationData, object_height_from_grids

        try:
            h = object_height_from_grids(obj, dsm, dtm)
            if h > 0:
                height = h
        except NoElevationData:
            pass
    if height is None:
        height = spec.height_estimate_m
    if height is None:
        height = fallback_height_m

    return Measured3D(
        object_id=obj.id,
        class_id=obj.class_id,
        distance_m=distance,
        width_m=width,
        height_m=height,
        azimuth_center_deg=az_center,
        azimuth_left_deg=az_left,
        azimuth_right_deg=az_right,
        source=obj.source,
        metadata=obj.metadata,
    )
