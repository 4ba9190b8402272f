"""GIS-driven bounding-box auto-annotation for 360-degree street panoramas."""

from .model import (
    BBox,
    BoxSet,
    ClassSpec,
    GeoPoint,
    PanoramaMeta,
    PointGeometry,
    Polygon,
    Polyline,
    Stage,
    Surface,
    UrbanObject,
    angular_diff,
    check_boxset,
    default_class_table,
    validate_class_table,
)
from .estimators import BoxRefiner, GeoBoxAnnotator, RepeatFactorSampler
from .pipeline import GenerateConfig, generate_for_panorama
from .refine import RefineConfig, refine_pipeline

__all__ = [
    "BBox",
    "BoxSet",
    "BoxRefiner",
    "ClassSpec",
    "GenerateConfig",
    "GeoBoxAnnotator",
    "GeoPoint",
    "PanoramaMeta",
    "PointGeometry",
    "Polygon",
    "Polyline",
    "RefineConfig",
    "RepeatFactorSampler",
    "Stage",
    "Surface",
    "UrbanObject",
    "angular_diff",
    "check_boxset",
    "default_class_table",
    "generate_for_panorama",
    "refine_pipeline",
    "validate_class_table",
]

__version__ = "0.1.0"
