"""Uncertainty-aware segmentation evaluation and daytime-guided refinement for dark images."""

__version__ = "0.1.0"

from .bilateral import BilateralParams, cross_bilateral_align, filter_exact
from .color import rgb_to_cielab
from .consistency import Agreement, annotation_consistency
from .core import (IGNORE, INVALID, ClassSet, DarksegError, ShapeMismatchError, ValidationError, as_labels,
                   as_mask, as_soft, validate_pair)
from .gps import GpsFix, Match, haversine, match_nearest
from .metrics import (ConfusionTallies, SweepAccumulator, UIoUCurve, accumulate_confusion, mean_uiou,
                      threshold_apply, uiou_curve, uiou_per_class, verify_theorem1)
from .refine import FusionParams, alpha_map, fuse, fusion_weights, refine_guided

__all__ = [
    "IGNORE", "INVALID", "ClassSet", "DarksegError", "ValidationError", "ShapeMismatchError",
    "as_labels", "as_mask", "as_soft", "validate_pair",
    "ConfusionTallies", "SweepAccumulator", "UIoUCurve", "accumulate_confusion", "mean_uiou",
    "threshold_apply", "uiou_curve", "uiou_per_class", "verify_theorem1",
    "BilateralParams", "cross_bilateral_align", "filter_exact", "rgb_to_cielab",
    "FusionParams", "alpha_map", "fuse", "fusion_weights", "refine_guided",
    "GpsFix", "Match", "haversine", "match_nearest",
    "Agreement", "annotation_consistency",
]
