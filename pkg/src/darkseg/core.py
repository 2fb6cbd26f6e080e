"""Shared label conventions, class sets and raster validation.

Array conventions used throughout the package:

* label maps are 2-D ``uint8`` arrays ``(H, W)`` holding class indices
  ``0..C-1``, :data:`IGNORE` for unlabeled pixels and, in predictions only,
  :data:`INVALID` for pixels the model declines to label;
* invalid masks are 2-D ``uint8`` arrays with 0 = valid, 1 = invalid;
* soft predictions are float arrays ``(C, H, W)`` whose channels sum to 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE = 255
INVALID = 254

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole",
    "traffic light", "traffic sign", "vegetation", "terrain",
    "sky", "person", "rider", "car", "truck", "bus",
    "train", "motorcycle", "bicycle",
)

# movable objects; not enumerated by the method itself, override per dataset
CITYSCAPES_DYNAMIC = (
    "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle",
)

NORMALIZATION_TOL = 1e-3


class DarksegError(Exception):
    """Base class for all package errors."""


class ValidationError(DarksegError, ValueError):
    """Input data violates a format or value contract."""


class ShapeMismatchError(ValidationError):
    pass


@dataclass(frozen=True)
class ClassSet:
    """Ordered semantic classes, the dynamic subset and the ignore value."""

    names: tuple[str, ...] = CITYSCAPES_CLASSES
    dynamic: frozenset[int] = field(
        default_factory=lambda: frozenset(CITYSCAPES_CLASSES.index(n) for n in CITYSCAPES_DYNAMIC)
    )
    ignore_value: int = IGNORE

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dynamic", frozenset(int(i) for i in self.dynamic))
        n = len(self.names)
        if n < 2:
            raise ValidationError("a class set needs at least two classes")
        if n > INVALID:
            raise ValidationError(f"at most {INVALID} classes fit in an 8-bit raster, got {n}")
        if len(set(self.names)) != n:
            raise ValidationError("class names must be unique")
        bad = sorted(i for i in self.dynamic if not 0 <= i < n)
        if bad:
            raise ValidationError(f"dynamic class indices out of range: {bad}")
        if 0 <= self.ignore_value < n or self.ignore_value == INVALID:
            raise ValidationError(f"ignore value {self.ignore_value} collides with a class index or the invalid sentinel")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def min_confidence(self) -> float:
        return 1.0 / len(self.names)

    def dynamic_mask(self) -> np.ndarray:
        """Boolean lookup table, ``True`` at dynamic class indices."""
        lut = np.zeros(len(self.names), dtype=bool)
        lut[list(self.dynamic)] = True
        return lut

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSet":
        names = tuple(d.get("names", CITYSCAPES_CLASSES))
        dyn = d.get("dynamic", CITYSCAPES_DYNAMIC if names == CITYSCAPES_CLASSES else ())
        # dynamic classes may be given by name or index
        dynamic = frozenset(names.index(x) if isinstance(x, str) else int(x) for x in dyn)
        return cls(names, dynamic, int(d.get("ignore_value", IGNORE)))

    @classmethod
    def from_json(cls, path) -> "ClassSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def as_soft(arr, tol: float = NORMALIZATION_TOL) -> np.ndarray:
    """Validate a ``(C, H, W)`` soft prediction and return a renormalized copy.

    Tensors whose per-pixel channel sums are off by more than `tol` are
    rejected rather than repaired; a wrong channel order usually shows up
    here first.
    """
    a = np.asarray(arr)
    if a.ndim != 3:
        raise ValidationError(f"soft prediction must be (C, H, W), got shape {a.shape}")
    if a.shape[0] < 2:
        raise ValidationError("soft prediction needs at least two channels")
    if not np.issubdtype(a.dtype, np.floating):
        raise ValidationError(f"soft prediction must be floating point, got {a.dtype}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("soft prediction contains NaN or Inf")
    if np.any(a < 0):
        raise ValidationError("soft prediction contains negative probabilities")
    s = a.sum(axis=0, dtype=np.float64)
    dev = np.abs(s - 1.0)
    if dev.size and dev.max() > tol:
        r, c = np.unravel_index(int(np.argmax(dev)), dev.shape)
        raise ValidationError(
            f"channel sums deviate from 1 by up to {dev.max():.3g} (at row {r}, col {c}); tolerance {tol}"
        )
    out = (a / s.astype(a.dtype)).astype(a.dtype, copy=False)
    out.flags.writeable = False
    return out


def confidence(soft: np.ndarray) -> np.ndarray:
    """Per-pixel maximum class probability."""
    return np.asarray(soft).max(axis=0)


def hard_labels(soft: np.ndarray) -> np.ndarray:
    """Per-pixel argmax as ``uint8``; ties go to the lowest class index."""
    return np.asarray(soft).argmax(axis=0).astype(np.uint8)


def illegal_pixels(labels: np.ndarray, classes: ClassSet, allow_invalid: bool) -> list[tuple[int, int, int]]:
    """Coordinates ``(row, col, value)`` of values outside the label alphabet."""
    legal = np.zeros(256, dtype=bool)
    legal[: classes.num_classes] = True
    legal[classes.ignore_value] = True
    if allow_invalid:
        legal[INVALID] = True
    lab = np.asarray(labels)
    if lab.dtype != np.uint8:
        wide = lab.astype(np.int64)
        oob = (wide < 0) | (wide > 255)
        inside = np.where(oob, 0, wide)
        bad = oob | ~legal[inside]
    else:
        bad = ~legal[lab]
    rows, cols = np.nonzero(bad)
    return [(int(r), int(c), int(lab[r, c])) for r, c in zip(rows, cols)]


def as_labels(arr, classes: ClassSet, allow_invalid: bool = False) -> np.ndarray:
    """Validate a label map; ground truth must not carry the invalid sentinel."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValidationError(f"label map must be 2-D, got shape {a.shape}")
    bad = illegal_pixels(a, classes, allow_invalid)
    if bad:
        head = ", ".join(f"({r}, {c})={v}" for r, c, v in bad[:10])
        more = f" and {len(bad) - 10} more" if len(bad) > 10 else ""
        raise ValidationError(f"{len(bad)} illegal label values: {head}{more}")
    return a.astype(np.uint8, copy=False)


def as_mask(arr) -> np.ndarray:
    """Validate an invalid mask, mapping raster value 255 to 1."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValidationError(f"invalid mask must be 2-D, got shape {a.shape}")
    out = np.where(a == 255, 1, a)
    if out.size and not np.isin(out, (0, 1)).all():
        vals = sorted(set(np.unique(out).tolist()) - {0, 1})
        raise ValidationError(f"invalid mask must be binary (0/1 or 0/255), found values {vals[:10]}")
    return out.astype(np.uint8)


def check_same_shape(*arrays, names=None) -> None:
    shapes = [np.shape(a)[-2:] for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(f"{n}={s}" for n, s in zip(names or range(len(shapes)), shapes))
        raise ShapeMismatchError(f"dimension mismatch: {label}")


@dataclass
class PairReport:
    height: int
    width: int
    labeled_pixels: int
    invalid_labeled_pixels: int
    illegal_labels: list = field(default_factory=list)
    illegal_mask: list = field(default_factory=list)

    @property
    def invalid_fraction(self) -> float:
        if self.labeled_pixels == 0:
            return 0.0
        return self.invalid_labeled_pixels / self.labeled_pixels

    @property
    def ok(self) -> bool:
        return not self.illegal_labels and not self.illegal_mask

    def summary(self) -> str:
        s = (f"{self.height}x{self.width}: {self.labeled_pixels} labeled pixels, "
             f"{100 * self.invalid_fraction:.2f}% invalid")
        if self.illegal_labels:
            s += f"; {len(self.illegal_labels)} illegal label values, first at {self.illegal_labels[0][:2]}"
        if self.illegal_mask:
            s += f"; {len(self.illegal_mask)} illegal mask values, first at {self.illegal_mask[0][:2]}"
        return s


def validate_pair(labels, mask, classes: ClassSet | None = None) -> PairReport:
    """Check a ground-truth label map against its invalid mask.

    Dimension mismatches raise :class:`ShapeMismatchError`; illegal raster
    values are itemized in the returned report.
    """
    classes = classes or ClassSet()
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    check_same_shape(labels, mask, names=("labels", "mask"))
    if labels.ndim != 2:
        raise ValidationError(f"label map must be 2-D, got shape {labels.shape}")
    bad_labels = illegal_pixels(labels, classes, allow_invalid=False)
    mvals = np.where(mask == 255, 1, mask)
    r, c = np.nonzero((mvals != 0) & (mvals != 1))
    bad_mask = [(int(i), int(j), int(mask[i, j])) for i, j in zip(r, c)]
    labeled = labels != classes.ignore_value
    return PairReport(
        height=labels.shape[0],
        width=labels.shape[1],
        labeled_pixels=int(labeled.sum()),
        invalid_labeled_pixels=int((labeled & (mvals == 1)).sum()),
        illegal_labels=bad_labels,
        illegal_mask=bad_mask,
    )
