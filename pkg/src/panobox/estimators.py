"""Scikit-learn style wrappers around the annotation pipeline.

The generation and refinement stages are transform-shaped (panoramas in,
box sets out; box sets in, box sets out), so they are exposed as estimators
with get_params/set_params for grid search and pipeline composition. The
functional API in pipeline/refine stays the source of truth.
"""

from __future__ import annotations

from typing import Iterable, Mapping

from sklearn.base import BaseEstimator, TransformerMixin

from .datasets import SamplingPlan, repeat_factors
from .ingest import ElevationGrid, ObjectStore
from .model import (
    BoxSet,
    PanoramaMeta,
    UrbanObject,
    check_boxset,
    check_panorama_meta,
    default_class_table,
)
from .pipeline import GenerateConfig, generate_for_panorama
from .refine import DEFAULT_NON_BLOCKING, RefineConfig, refine_pipeline


class GeoBoxAnnotator(BaseEstimator):
    """Projects geospatial objects into pixel boxes on panoramas.

    fit() binds the geodata (an ObjectStore or an iterable of UrbanObject,
    plus optional DSM/DTM grids); transform() maps panorama metadata to
    generated BoxSets. fit and transform take different inputs, so the
    TransformerMixin fit_transform shortcut is deliberately not provided.
    """

    def __init__(
        self,
        radius_m: float = 150.0,
        forward_x_fraction: float = 0.5,
        fallback_height_m: float = 8.0,
        validate: bool = True,
    ):
        self.radius_m = radius_m
        self.forward_x_fraction = forward_x_fraction
        self.fallback_height_m = fallback_height_m
        self.validate = validate

    def fit(self, X, y=None, *, dsm: ElevationGrid | None = None, dtm: ElevationGrid | None = None):
        if isinstance(X, ObjectStore):
            self.store_ = X
        else:
            objects = list(X)
            for obj in objects:
                if not isinstance(obj, UrbanObject):
                    raise TypeError("fit expects an ObjectStore or UrbanObject iterable")
            self.store_ = ObjectStore(objects)
        self.dsm_ = dsm
        self.dtm_ = dtm
        self.class_table_ = default_class_table()
        return self

    def transform(self, X: Iterable[PanoramaMeta]) -> list[BoxSet]:
        if not hasattr(self, "store_"):
            raise RuntimeError("GeoBoxAnnotator is not fitted")
        config = GenerateConfig(
            radius_m=self.radius_m,
            forward_x_fraction=self.forward_x_fraction,
            fallback_height_m=self.fallback_height_m,
        )
        out = []
        for pano in X:
            if self.validate:
                check_panorama_meta(pano)
            bs = generate_for_panorama(
                pano, self.store_, self.class_table_, self.dsm_, self.dtm_, config
            )
            if self.validate:
                check_boxset(bs)
            out.append(bs)
        return out


class BoxRefiner(BaseEstimator, TransformerMixin):
    """Occlusion refinement as a stateless BoxSet -> BoxSet transformer."""

    def __init__(
        self,
        tree_overlap_threshold: float = 0.30,
        general_overlap_threshold: float = 0.80,
        merge_min_iou: float = 0.50,
        non_blocking: frozenset | None = None,
    ):
        self.tree_overlap_threshold = tree_overlap_threshold
        self.general_overlap_threshold = general_overlap_threshold
        self.merge_min_iou = merge_min_iou
        self.non_blocking = non_blocking

    def _config(self) -> RefineConfig:
        return RefineConfig(
            tree_overlap_threshold=self.tree_overlap_threshold,
            general_overlap_threshold=self.general_overlap_threshold,
            merge_min_iou=self.merge_min_iou,
            non_blocking=(
                frozenset(self.non_blocking)
                if self.non_blocking is not None
                else DEFAULT_NON_BLOCKING
            ),
        )

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Iterable[BoxSet]) -> list[BoxSet]:
        config = self._config()
        return [refine_pipeline(bs, config) for bs in X]


class RepeatFactorSampler(BaseEstimator, TransformerMixin):
    """Long-tail oversampler: image repeat factors from class frequencies."""

    def __init__(self, t: float = 0.1, seed: int = 0):
        self.t = t
        self.seed = seed

    def fit(self, X: Mapping[str, Iterable], y=None):
        self.plan_: SamplingPlan = repeat_factors(X, t=self.t, seed=self.seed)
        self.class_repeat_ = self.plan_.class_repeat
        self.image_repeat_ = self.plan_.image_repeat
        return self

    def transform(self, X: Mapping[str, Iterable]) -> list[str]:
        if not hasattr(self, "plan_"):
            raise RuntimeError("RepeatFactorSampler is not fitted")
        return list(self.plan_.epoch)
