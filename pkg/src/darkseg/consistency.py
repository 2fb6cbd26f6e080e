"""Agreement between two independent annotations of the same images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassSet, as_mask, check_same_shape


@dataclass
class Agreement:
    """Pixel counts behind the two agreement percentages; addable across images."""

    semantic_agree: int = 0
    jointly_labeled: int = 0
    mask_agree: int = 0
    pixels: int = 0

    def __add__(self, other: "Agreement") -> "Agreement":
        return Agreement(self.semantic_agree + other.semantic_agree, self.jointly_labeled + other.jointly_labeled,
                         self.mask_agree + other.mask_agree, self.pixels + other.pixels)

    @property
    def semantic_percent(self) -> float | None:
        """Share of jointly labeled pixels with equal labels; ``None`` if there are none."""
        if self.jointly_labeled == 0:
            return None
        return 100.0 * self.semantic_agree / self.jointly_labeled

    @property
    def mask_percent(self) -> float | None:
        if self.pixels == 0:
            return None
        return 100.0 * self.mask_agree / self.pixels


def annotation_consistency(a, b, classes: ClassSet | None = None) -> Agreement:
    """Compare ``(labels, mask)`` pairs from two annotators.

    Semantic agreement counts pixels labeled (not ignore) in both; mask
    agreement counts all pixels.
    """
    classes = classes or ClassSet()
    la, ma = np.asarray(a[0]), as_mask(a[1])
    lb, mb = np.asarray(b[0]), as_mask(b[1])
    check_same_shape(la, ma, lb, mb, names=("labels_a", "mask_a", "labels_b", "mask_b"))
    joint = (la != classes.ignore_value) & (lb != classes.ignore_value)
    return Agreement(
        semantic_agree=int((joint & (la == lb)).sum()),
        jointly_labeled=int(joint.sum()),
        mask_agree=int((ma == mb).sum()),
        pixels=int(ma.size),
    )
