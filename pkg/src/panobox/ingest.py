"""File ingestion: geospatial objects, elevation rasters, panorama poses.

Formats (all coordinates in one planar metric CRS):
  - objects: GeoJSON subset, a FeatureCollection of Point / LineString /
    Polygon features with a `class` property plus free-form metadata
    properties; optional `width_m` / `height_m` properties override the
    class estimates, `source` tags provenance.
  - elevation: ESRI-style ASCII grid (`ncols`, `nrows`, `xllcorner`,
    `yllcorner`, `cellsize`, `nodata_value` headers, then north row first).
  - poses: JSON lines, one record per panorama.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import geometry_disk_distance
from .model import (
    ClassId,
    GeoPoint,
    Geometry,
    GeometryError,
    PanoramaMeta,
    PointGeometry,
    Polygon,
    Polyline,
    Surface,
    UrbanObject,
)


class FormatError(ValueError):
    pass


class NoElevationData(Exception):
    """No valid elevation cell covers the requested footprint."""


# ---------------------------------------------------------------------------
# Elevation grids


@dataclass(frozen=True)
class ElevationGrid:
    """Regular raster of heights; origin is the lower-left cell corner."""

    origin: GeoPoint
    cell_size: float
    rows: int
    cols: int
    values: np.ndarray  # shape (rows, cols), row 0 = northernmost row
    nodata: float = -9999.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise FormatError("cell_size must be > 0")
        if self.values.shape != (self.rows, self.cols):
            raise FormatError("grid value array does not match declared dimensions")

    def sample(self, p: GeoPoint) -> float | None:
        """Nearest-cell height at p; None outside the grid or on nodata."""
        col = int(math.floor((p[0] - self.origin[0]) / self.cell_size))
        row_s = int(math.floor((p[1] - self.origin[1]) / self.cell_size))
        if col < 0 or col >= self.cols or row_s < 0 or row_s >= self.rows:
            return None
        v = float(self.values[self.rows - 1 - row_s, col])
        if v == self.nodata:
            return None
        return v

    def cell_center(self, row_from_north: int, col: int) -> GeoPoint:
        x = self.origin[0] + (col + 0.5) * self.cell_size
        y = self.origin[1] + (self.rows - row_from_north - 0.5) * self.cell_size
        return GeoPoint(x, y)


def load_grid(path) -> ElevationGrid:
    text = Path(path).read_text().split("\n")
    header: dict[str, float] = {}
    idx = 0
    while idx < len(text):
        parts = text[idx].split()
        if len(parts) == 2 and parts[0].lower() in (
            "ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value",
        ):
            try:
                header[parts[0].lower()] = float(parts[1])
            except ValueError as e:
                raise FormatError(f"bad header line: {text[idx]!r}") from e
            idx += 1
        else:
            break
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise FormatError(f"missing grid header: {key}")
    rows = int(header["nrows"])
    cols = int(header["ncols"])
    nodata = header.get("nodata_value", -9999.0)
    flat: list[float] = []
    for line in text[idx:]:
        if not line.strip():
            continue
        for tok in line.split():
            try:
                flat.append(float(tok))
            except ValueError as e:
                raise FormatError(f"non-numeric cell value: {tok!r}") from e
    if len(flat) != rows * cols:
        raise FormatError(f"expected {rows * cols} cells, found {len(flat)}")
    values = np.asarray(flat, dtype=np.float64).reshape(rows, cols)
    return ElevationGrid(
        origin=GeoPoint(header["xllcorner"], header["yllcorner"]),
        cell_size=header["cellsize"],
        rows=rows,
        cols=cols,
        values=values,
        nodata=nodata,
    )


def save_grid(grid: ElevationGrid, path) -> None:
    lines = [
        f"ncols {grid.cols}",
        f"nrows {grid.rows}",
        f"xllcorner {grid.origin[0]!r}",
        f"yllcorner {grid.origin[1]!r}",
        f"cellsize {grid.cell_size!r}",
        f"nodata_value {grid.nodata!r}",
    ]
    for row in grid.values:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _footprint_cells(obj: UrbanObject, grid: ElevationGrid, buffer_m: float = 0.5):
    """Cell centers covered by the object's footprint.

    Polygons cover cells whose centers fall inside; points and polylines
    cover cells whose centers lie within buffer_m of the geometry.
    """
    from .geometry import point_segment_distance, polygon_contains

    geom = obj.geometry
    if isinstance(geom, PointGeometry):
        xs = [geom.point[0]]
        ys = [geom.point[1]]
    elif isinstance(geom, Polyline):
        xs = [p[0] for p in geom.points]
        ys = [p[1] for p in geom.points]
    else:
        xs = [p[0] for p in geom.ring]
        ys = [p[1] for p in geom.ring]
    pad = buffer_m + grid.cell_size
    col0 = max(0, int((min(xs) - pad - grid.origin[0]) / grid.cell_size))
    col1 = min(grid.cols - 1, int((max(xs) + pad - grid.origin[0]) / grid.cell_size))
    row_s0 = max(0, int((min(ys) - pad - grid.origin[1]) / grid.cell_size))
    row_s1 = min(grid.rows - 1, int((max(ys) + pad - grid.origin[1]) / grid.cell_size))
    for row_s in range(row_s0, row_s1 + 1):
        row_n = grid.rows - 1 - row_s
        for col in range(col0, col1 + 1):
            center = grid.cell_center(row_n, col)
            if isinstance(geom, Polygon):
                if polygon_contains(geom, center):
                    yield center
            elif isinstance(geom, PointGeometry):
                if math.hypot(center[0] - geom.point[0], center[1] - geom.point[1]) <= buffer_m:
                    yield center
            else:
                if any(
                    point_segment_distance(center, a, b) <= buffer_m
                    for a, b in zip(geom.points, geom.points[1:])
                ):
                    yield center


def object_height_from_grids(
    obj: UrbanObject, dsm: ElevationGrid, dtm: ElevationGrid
) -> float:
    """Max DSM-DTM difference over the object's footprint, clamped at 0.

    Raises NoElevationData when no footprint cell carries valid data in both
    grids.
    """
    best: float | None = None
    for center in _footprint_cells(obj, dsm):
        surface = dsm.sample(center)
        terrain = dtm.sample(center)
        if surface is None or terrain is None:
            continue
        diff = surface - terrain
        if best is None or diff > best:
            best = diff
    if best is None:
        raise NoElevationData(obj.id)
    return max(0.0, best)


# ---------------------------------------------------------------------------
# Geospatial objects


class ObjectStore:
    """Immutable spatial index over urban objects (uniform grid buckets)."""

    def __init__(self, objects: Iterable[UrbanObject], cell_size: float = 64.0):
        self._objects = list(objects)
        self._cell = cell_size
        self._buckets: dict[tuple[int, int], list[int]] = {}
        for idx, obj in enumerate(self._objects):
            x0, y0, x1, y1 = _extent(obj.geometry)
            for cx in range(int(x0 // cell_size), int(x1 // cell_size) + 1):
                for cy in range(int(y0 // cell_size), int(y1 // cell_size) + 1):
                    self._buckets.setdefault((cx, cy), []).append(idx)

    def __len__(self) -> int:
        return len(self._objects)

    def __iter__(self):
        return iter(self._objects)

    def query_radius(self, cam: GeoPoint, radius: float) -> list[UrbanObject]:
        cell = self._cell
        seen: set[int] = set()
        out: list[int] = []
        cx0 = int((cam[0] - radius) // cell)
        cx1 = int((cam[0] + radius) // cell)
        cy0 = int((cam[1] - radius) // cell)
        cy1 = int((cam[1] + radius) // cell)
        for cx in range(cx0, cx1 + 1):
            for cy in range(cy0, cy1 + 1):
                for idx in self._buckets.get((cx, cy), ()):
                    if idx in seen:
                        continue
                    seen.add(idx)
                    if geometry_disk_distance(self._objects[idx].geometry, cam) <= radius:
                        out.append(idx)
        out.sort()
        return [self._objects[i] for i in out]


def _extent(geom: Geometry) -> tuple[float, float, float, float]:
    if isinstance(geom, PointGeometry):
        x, y = geom.point
        return x, y, x, y
    pts = geom.points if isinstance(geom, Polyline) else geom.ring
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return min(xs), min(ys), max(xs), max(ys)


def default_class_map() -> dict[str, ClassId]:
    """Source-tag to class-id rules for the shipped 22-class table."""
    from .model import DEFAULT_CLASS_IDS

    rules = {cid: cid for cid in DEFAULT_CLASS_IDS}
    rules.update(
        {
            "railway_tracks": "railway_track",
            "lamp_post": "lamppost",
            "wind_turbine": "windturbine",
        }
    )
    return rules


def _normalize_tag(tag: str) -> str:
    return tag.strip().lower().replace(" ", "_").replace("-", "_")


@dataclass
class LoadReport:
    loaded: int = 0
    skipped_unmapped: int = 0
    errors: list[str] = field(default_factory=list)


def _parse_geometry(g: dict) -> Geometry:
    gtype = g.get("type")
    coords = g.get("coordinates")
    if gtype == "Point":
        return PointGeometry(GeoPoint(float(coords[0]), float(coords[1])))
    if gtype == "LineString":
        return Polyline(tuple(GeoPoint(float(x), float(y)) for x, y in coords))
    if gtype == "Polygon":
        if not coords:
            raise GeometryError("polygon without rings")
        return Polygon(tuple(GeoPoint(float(x), float(y)) for x, y in coords[0]))
    raise GeometryError(f"unsupported geometry type: {gtype}")


def load_objects(
    path,
    class_map: dict[str, ClassId] | None = None,
    *,
    default_source: str = "",
    report: LoadReport | None = None,
) -> ObjectStore:
    """Parse the documented GeoJSON subset into a spatial store.

    Features whose `class` property has no mapping rule are counted and
    skipped; features with invalid geometry are reported per feature and
    excluded (non-fatal). All other properties are preserved verbatim as
    object metadata.
    """
    class_map = class_map if class_map is not None else default_class_map()
    report = report if report is not None else LoadReport()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed GeoJSON: {e}") from e
    if doc.get("type") != "FeatureCollection" or "features" not in doc:
        raise FormatError("expected a FeatureCollection")
    objects: list[UrbanObject] = []
    for i, feature in enumerate(doc["features"]):
        props = dict(feature.get("properties") or {})
        tag = props.pop("class", None)
        fid = str(feature.get("id", props.pop("id", f"f{i}")))
        if tag is None or _normalize_tag(str(tag)) not in class_map:
            report.skipped_unmapped += 1
            continue
        class_id = class_map[_normalize_tag(str(tag))]
        source = str(props.pop("source", default_source))
        width = props.pop("width_m", None)
        height = props.pop("height_m", None)
        try:
            geom = _parse_geometry(feature.get("geometry") or {})
            obj = UrbanObject(
                id=fid,
                class_id=class_id,
                geometry=geom,
                source=source,
                metadata=props,
                width_override_m=float(width) if width is not None else None,
                height_override_m=float(height) if height is not None else None,
            )
        except (GeometryError, TypeError, ValueError, IndexError) as e:
            report.errors.append(f"feature {fid}: {e}")
            continue
        objects.append(obj)
        report.loaded += 1
    return ObjectStore(objects)


def save_objects(store: ObjectStore, path) -> None:
    features = []
    for obj in store:
        geom = obj.geometry
        if isinstance(geom, PointGeometry):
            g = {"type": "Point", "coordinates": [geom.point[0], geom.point[1]]}
        elif isinstance(geom, Polyline):
            g = {"type": "LineString", "coordinates": [[p[0], p[1]] for p in geom.points]}
        else:
            ring = [[p[0], p[1]] for p in geom.closed_ring]
            g = {"type": "Polygon", "coordinates": [ring]}
        props = {"class": obj.class_id, **obj.metadata}
        if obj.source:
            props["source"] = obj.source
        if obj.width_override_m is not None:
            props["width_m"] = obj.width_override_m
        if obj.height_override_m is not None:
            props["height_m"] = obj.height_override_m
        features.append(
            {"type": "Feature", "id": obj.id, "geometry": g, "properties": props}
        )
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# Panorama poses


def load_poses(path) -> list[PanoramaMeta]:
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            poses.append(
                PanoramaMeta(
                    id=str(rec["id"]),
                    position=GeoPoint(float(rec["x"]), float(rec["y"])),
                    heading_deg=float(rec["heading_deg"]),
                    timestamp=datetime.fromisoformat(rec["timestamp_iso8601"]),
                    surface=Surface(rec.get("surface", "land")),
                    width_px=int(rec.get("width_px", 1400)),
                    height_px=int(rec.get("height_px", 700)),
                    roll_deg=float(rec.get("roll_deg", 0.0)),
                    pitch_deg=float(rec.get("pitch_deg", 0.0)),
                )
            )
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}:{n}: {e}") from e
    return poses


def save_poses(poses: Iterable[PanoramaMeta], path) -> None:
    lines = []
    for p in poses:
        lines.append(
            json.dumps(
                {
                    "id": p.id,
                    "x": p.position[0],
                    "y": p.position[1],
                    "heading_deg": p.heading_deg,
                    "timestamp_iso8601": p.timestamp.isoformat(),
                    "surface": p.surface.value,
                    "width_px": p.width_px,
                    "height_px": p.height_px,
                    "roll_deg": p.roll_deg,
                    "pitch_deg": p.pitch_deg,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# Density filtering


def density_filter(
    panos: Sequence[PanoramaMeta], min_sep: float = 2.5
) -> list[PanoramaMeta]:
    """Keep a subset of panoramas all at least min_sep meters apart.

    Greedy by recency: panoramas are visited newest first and accepted iff no
    already-accepted panorama lies within min_sep, so within any conflict
    group the most recent image wins. Output preserves the input order.
    """
    if not min_sep > 0:
        raise ValueError("min_sep must be > 0")
    order = sorted(
        range(len(panos)),
        key=lambda i: (panos[i].timestamp, panos[i].id),
        reverse=True,
    )
    cell = min_sep
    buckets: dict[tuple[int, int], list[int]] = {}
    accepted: set[int] = set()
    for i in order:
        x, y = panos[i].position
        cx = int(x // cell)
        cy = int(y // cell)
        ok = True
        for bx in range(cx - 1, cx + 2):
            for by in range(cy - 1, cy + 2):
                for j in buckets.get((bx, by), ()):
                    px, py = panos[j].position
                    if math.hypot(px - x, py - y) < min_sep:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            accepted.add(i)
            buckets.setdefault((cx, cy), []).append(i)
    return [p for i, p in enumerate(panos) if i in accepted]


# ---------------------------------------------------------------------------
# Geodetic helper (ingest-time only; the core never sees lat/lon)

_EARTH_RADIUS_M = 6371008.8


def wgs84_to_local(lat: float, lon: float, lat0: float, lon0: float) -> GeoPoint:
    """Project WGS84 lat/lon onto a local azimuthal-equidistant plane.

    (lat0, lon0) maps to the origin; x points east, y north, units meters.
    """
    phi1 = math.radians(lat0)
    phi2 = math.radians(lat)
    dlon = math.radians(lon - lon0)
    sin_d = math.sin(phi1) * math.sin(phi2) + math.cos(phi1) * math.cos(phi2) * math.cos(dlon)
    sin_d = max(-1.0, min(1.0, sin_d))
    d = math.acos(sin_d) * _EARTH_RADIUS_M
    theta = math.atan2(
        math.sin(dlon) * math.cos(phi2),
        math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlon),
    )
    return GeoPoint(d * math.sin(theta), d * math.cos(theta))
