"""Guided refinement of dark-image predictions with aligned daytime predictions.

The daytime soft prediction is first aligned to the dark image with a cross
bilateral filter, then fused with the dark prediction pixel by pixel::

    refined = Fz / (Fz + a*F1) * S_dark + a*F1 / (Fz + a*F1) * S_day_aligned

where ``Fz`` and ``F1`` are the two confidence maps and ``a`` is ``alpha_l``
where the predictions disagree on a dynamic object and ``alpha_h`` elsewhere.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .bilateral import BilateralParams, auto_downsample, cross_bilateral_align
from .color import rgb_to_cielab
from .core import ClassSet, check_same_shape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionParams:
    alpha_l: float = 0.3
    alpha_h: float = 0.6
    eta: float = 0.2

    def __post_init__(self):
        if not 0 < self.alpha_l <= self.alpha_h <= 1:
            raise ValueError(f"need 0 < alpha_l <= alpha_h <= 1, got {self.alpha_l}, {self.alpha_h}")
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")


def confidence_map(soft) -> np.ndarray:
    """Per-pixel maximum class probability, in [1/C, 1]."""
    return np.asarray(soft).max(axis=0)


def alpha_map(aligned_day, dark, classes: ClassSet, params: FusionParams = FusionParams()) -> np.ndarray:
    """Per-pixel guidance weight.

    ``alpha_l`` where either prediction's argmax is a dynamic class that the
    other prediction gives at most ``eta`` probability; ``alpha_h`` otherwise.
    """
    aligned_day = np.asarray(aligned_day)
    dark = np.asarray(dark)
    check_same_shape(aligned_day, dark, names=("aligned_day", "dark"))
    dyn = classes.dynamic_mask()
    c1 = aligned_day.argmax(axis=0)
    c2 = dark.argmax(axis=0)
    dark_at_c1 = np.take_along_axis(dark, c1[None], axis=0)[0]
    day_at_c2 = np.take_along_axis(aligned_day, c2[None], axis=0)[0]
    low = (dyn[c1] & (dark_at_c1 <= params.eta)) | (dyn[c2] & (day_at_c2 <= params.eta))
    return np.where(low, params.alpha_l, params.alpha_h)


def fusion_weights(f_dark, f_day, alpha):
    """Weights ``(w_dark, w_day)`` given the two confidences and alpha."""
    f_dark = np.asarray(f_dark, dtype=np.float64)
    g = np.asarray(alpha, dtype=np.float64) * np.asarray(f_day, dtype=np.float64)
    den = f_dark + g
    return f_dark / den, g / den


def fuse(dark, aligned_day, alpha) -> np.ndarray:
    """Confidence-adaptive convex combination of the two soft predictions."""
    dark = np.asarray(dark)
    aligned_day = np.asarray(aligned_day)
    check_same_shape(dark, aligned_day, alpha, names=("dark", "aligned_day", "alpha"))
    w_dark, w_day = fusion_weights(confidence_map(dark), confidence_map(aligned_day), alpha)
    dt = np.result_type(dark.dtype, aligned_day.dtype)
    return (w_dark.astype(dt) * dark + w_day.astype(dt) * aligned_day).astype(dt, copy=False)


@dataclass
class Refinement:
    soft: np.ndarray  # (C, H, W) refined distribution
    labels: np.ndarray  # (H, W) uint8 argmax pseudo-labels
    alpha: np.ndarray
    aligned_day: np.ndarray
    seconds: float = 0.0


def refine_guided(dark_soft, dark_rgb, day_soft, classes: ClassSet | None = None,
                  bilateral: BilateralParams | None = None,
                  fusion: FusionParams = FusionParams()) -> Refinement:
    """Refine a dark-image prediction using its daytime counterpart.

    `dark_rgb` is the 8-bit sRGB dark frame. Without explicit bilateral
    parameters, frames of 1080 rows or more are filtered at quarter
    resolution.
    """
    t0 = time.perf_counter()
    dark_soft = np.asarray(dark_soft)
    day_soft = np.asarray(day_soft)
    classes = classes or ClassSet()
    check_same_shape(dark_soft, day_soft, np.moveaxis(np.asarray(dark_rgb), -1, 0),
                     names=("dark_soft", "day_soft", "dark_image"))
    if dark_soft.shape[0] != classes.num_classes or day_soft.shape[0] != classes.num_classes:
        raise ValueError(f"soft predictions must have {classes.num_classes} channels")
    if bilateral is None:
        bilateral = BilateralParams(downsample_factor=auto_downsample(dark_soft.shape))
    lab = rgb_to_cielab(dark_rgb, dtype=bilateral.dtype)
    aligned = cross_bilateral_align(day_soft, lab, bilateral)
    alpha = alpha_map(aligned, dark_soft, classes, fusion)
    refined = fuse(dark_soft, aligned, alpha)
    labels = refined.argmax(axis=0).astype(np.uint8)
    dt = time.perf_counter() - t0
    log.info("refined %dx%d prediction in %.2fs (alpha_l at %.1f%% of pixels)",
             labels.shape[0], labels.shape[1], dt, 100.0 * np.mean(alpha == fusion.alpha_l))
    return Refinement(refined, labels, alpha, aligned, dt)
