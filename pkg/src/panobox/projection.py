"""Equirectangular projection of measured objects into pixel boxes.

x is linear in azimuth (360 degrees across the full width) and y linear in
elevation angle (180 degrees top to bottom, horizon at mid-height). Objects
whose azimuth interval crosses the image seam are emitted as a linked pair of
boxes pinned to the two image extremities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import Measured3D
from .model import BBox, PanoramaMeta, Surface, angular_diff

CAMERA_HEIGHT_LAND_M = 2.0
CAMERA_HEIGHT_WATER_M = 1.0

_MIN_BOX_PX = 1.0


@dataclass(frozen=True)
class CameraModel:
    camera_height_m: float
    heading_deg: float
    width_px: int
    height_px: int
    forward_x_fraction: float = 0.5  # where the heading direction lands in x

    def __post_init__(self):
        if not self.camera_height_m > 0:
            raise ValueError("camera_height_m must be > 0")
        if not (0.0 <= self.forward_x_fraction < 1.0):
            raise ValueError("forward_x_fraction must be in [0, 1)")

    @classmethod
    def for_panorama(cls, meta: PanoramaMeta, forward_x_fraction: float = 0.5) -> "CameraModel":
        height = CAMERA_HEIGHT_LAND_M if meta.surface == Surface.LAND else CAMERA_HEIGHT_WATER_M
        return cls(
            camera_height_m=height,
            heading_deg=meta.heading_deg,
            width_px=meta.width_px,
            height_px=meta.height_px,
            forward_x_fraction=forward_x_fraction,
        )


def azimuth_to_x(cm: CameraModel, azimuth_deg: float) -> float:
    """Pixel column of a compass bearing; wraps continuously across the seam."""
    frac = (cm.forward_x_fraction + angular_diff(azimuth_deg, cm.heading_deg) / 360.0) % 1.0
    return cm.width_px * frac


def elevation_to_y(cm: CameraModel, height_above_ground_m: float, distance_m: float) -> float:
    """Pixel row of a point at the given height seen at the given distance."""
    if not distance_m > 0:
        raise ValueError("distance_m must be > 0")
    phi = math.degrees(math.atan2(height_above_ground_m - cm.camera_height_m, distance_m))
    return cm.height_px * (0.5 - phi / 180.0)


class DegenerateExtent(Exception):
    """Angular extent covers the full circle; the object cannot be boxed."""


def project_box(cm: CameraModel, m: Measured3D, *, link_id: str | None = None) -> list[BBox]:
    """Project one measured object; returns zero, one or two (linked) boxes.

    The vertical extent runs from the object top to the ground at the
    object's minimum distance. The horizontal extent uses the tangent
    azimuths when present, otherwise a symmetric half-angle
    atan(width / (2 * distance)) around the center azimuth. Boxes thinner or
    shorter than one pixel after clamping are dropped; a seam-crossing
    interval yields two boxes sharing a link id.
    """
    d = m.distance_m
    y_top = elevation_to_y(cm, m.height_m, d)
    y_bot = elevation_to_y(cm, 0.0, d)
    y_min = max(0.0, min(float(cm.height_px), y_top))
    y_max = max(0.0, min(float(cm.height_px), y_bot))
    if y_max - y_min < _MIN_BOX_PX:
        return []

    if m.azimuth_left_deg is not None and m.azimuth_right_deg is not None:
        az_l = m.azimuth_left_deg
        az_r = m.azimuth_right_deg
        span = (az_r - az_l) % 360.0
        if span <= 0.0:
            return []
        if span >= 360.0:  # cannot occur via modulo; guards future callers
            raise DegenerateExtent(m.object_id)
    else:
        half = math.degrees(math.atan(m.width_m / (2.0 * d)))
        if half <= 0.0:
            return []
        az_l = m.azimuth_center_deg - half
        az_r = m.azimuth_center_deg + half

    x_l = azimuth_to_x(cm, az_l)
    x_r = azimuth_to_x(cm, az_r)
    width = float(cm.width_px)

    def make(x0: float, x1: float, lid: str | None) -> BBox | None:
        x0 = max(0.0, min(width, x0))
        x1 = max(0.0, min(width, x1))
        if x1 - x0 < _MIN_BOX_PX:
            return None
        return BBox(
            class_id=m.class_id,
            x_min=x0,
            y_min=y_min,
            x_max=x1,
            y_max=y_max,
            object_id=m.object_id,
            link_id=lid,
            distance_m=d,
            source=m.source or None,
            metadata=dict(m.metadata),
        )

    if x_l < x_r:
        box = make(x_l, x_r, None)
        return [box] if box else []

    # interval wraps across the seam: a right-edge piece and a left-edge piece
    lid = link_id if link_id is not None else f"link:{m.object_id}"
    right_piece = make(x_l, width, lid)
    left_piece = make(0.0, x_r, lid)
    if right_piece and left_piece:
        return [right_piece, left_piece]
    survivor = right_piece or left_piece
    if survivor is None:
        return []
    return [survivor.moved(link_id=None)]
