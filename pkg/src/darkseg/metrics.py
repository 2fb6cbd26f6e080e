"""Uncertainty-aware IoU (UIoU) over ground truth with invalid regions.

Five pixel sets are counted per class ``c``:

    TP  H = c and prediction = c
    FP  H labeled, H != c and prediction = c
    FN  H = c and prediction not in {c, invalid}
    TI  H = c, prediction = invalid, mask = 1
    FI  H = c, prediction = invalid, mask = 0

and ``UIoU = (TP + TI) / (TP + TI + FP + FN + FI)``. Pixels whose ground
truth is the ignore value are never counted. Thresholding a soft prediction
at ``theta = 1/C`` invalidates nothing, so UIoU then equals plain IoU.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import INVALID, ClassSet, DarksegError, ValidationError, as_labels, as_mask, check_same_shape

log = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 101


class EmptyEvaluationError(DarksegError):
    """No class has a defined score."""


@dataclass
class ConfusionTallies:
    """Per-class pixel counts at one confidence threshold."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    ti: np.ndarray
    fi: np.ndarray
    theta: float | None = None

    @classmethod
    def zeros(cls, num_classes: int, theta=None) -> "ConfusionTallies":
        z = lambda: np.zeros(num_classes, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z(), z(), theta)

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionTallies") -> "ConfusionTallies":
        if self.theta != other.theta:
            raise ValueError(f"cannot merge tallies taken at theta={self.theta} and theta={other.theta}")
        return ConfusionTallies(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                                self.ti + other.ti, self.fi + other.fi, self.theta)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionTallies):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("tp", "fp", "fn", "ti", "fi"))

    def as_rows(self) -> np.ndarray:
        """``(C, 5)`` matrix of tp, fp, fn, ti, fi."""
        return np.stack([self.tp, self.fp, self.fn, self.ti, self.fi], axis=1)

    def uiou(self) -> np.ndarray:
        """Per-class UIoU; NaN where the denominator is zero."""
        num = self.tp + self.ti
        den = num + self.fp + self.fn + self.fi
        out = np.full(len(num), np.nan)
        ok = den > 0
        out[ok] = num[ok] / den[ok]
        return out

    def iou(self) -> np.ndarray:
        """Per-class IoU treating invalid predictions as plain misses."""
        den = self.tp + self.fp + self.fn + self.ti + self.fi
        out = np.full(len(den), np.nan)
        ok = den > 0
        out[ok] = self.tp[ok] / den[ok]
        return out


def uiou_per_class(t: ConfusionTallies, c: int) -> float | None:
    """UIoU of class `c`, or ``None`` when the class never occurs."""
    num = int(t.tp[c] + t.ti[c])
    den = num + int(t.fp[c] + t.fn[c] + t.fi[c])
    if den == 0:
        return None
    return num / den


def mean_uiou(t: ConfusionTallies) -> float:
    """Mean UIoU over classes whose score is defined."""
    scores = t.uiou()
    defined = ~np.isnan(scores)
    if not defined.any():
        raise EmptyEvaluationError("empty evaluation: no class has labeled or predicted pixels")
    # correctly rounded sum: the result does not depend on summation order
    return math.fsum(scores[defined]) / int(defined.sum())


def check_theta(theta: float, num_classes: int) -> float:
    lo = 1.0 / num_classes
    if not (lo - 1e-12 <= theta <= 1.0):
        raise ValueError(f"theta must lie in [1/C, 1] = [{lo:.6g}, 1], got {theta}")
    return float(theta)


def threshold_apply(soft: np.ndarray, theta: float) -> np.ndarray:
    """Argmax labels with pixels below `theta` confidence set to ``INVALID``.

    Pixels keep their label when confidence >= theta. At ``theta = 1/C``
    nothing is invalidated, whatever the rounding of the probabilities.
    """
    soft = np.asarray(soft)
    C = soft.shape[0]
    theta = check_theta(theta, C)
    labels = soft.argmax(axis=0).astype(np.uint8)
    if theta > 1.0 / C:
        conf = soft.max(axis=0).astype(np.float64)
        labels[conf < theta] = INVALID
    return labels


def accumulate_confusion(gt, mask, pred, classes: ClassSet, theta: float | None = None) -> ConfusionTallies:
    """Count TP/FP/FN/TI/FI for one image."""
    check_same_shape(gt, mask, pred, names=("gt", "mask", "pred"))
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    mask = np.asarray(mask)
    C = classes.num_classes
    labeled = gt != classes.ignore_value
    g = gt[labeled].astype(np.int64)
    p = pred[labeled].astype(np.int64)
    j = mask[labeled]
    if g.size and g.max() >= C:
        raise ValidationError("ground truth contains values outside the class set")
    if np.any((j != 0) & (j != 1)):
        raise ValidationError("invalid mask must be binary")
    invalid = p == INVALID
    correct = p == g
    wrong = ~correct & ~invalid
    fp_src = p[wrong]
    fp_src = fp_src[fp_src < C]
    ti_sel = invalid & (j == 1)
    fi_sel = invalid & (j == 0)
    # binary mask: a pixel cannot be both a true and a false invalid
    assert not np.any(ti_sel & fi_sel)
    return ConfusionTallies(
        tp=np.bincount(g[correct], minlength=C).astype(np.int64),
        fp=np.bincount(fp_src, minlength=C).astype(np.int64),
        fn=np.bincount(g[wrong], minlength=C).astype(np.int64),
        ti=np.bincount(g[ti_sel], minlength=C).astype(np.int64),
        fi=np.bincount(g[fi_sel], minlength=C).astype(np.int64),
        theta=theta,
    )


def default_grid(num_classes: int, n: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """`n` uniform thresholds over [1/C, 1], both ends included."""
    return np.linspace(1.0 / num_classes, 1.0, n)


def check_grid(grid, num_classes: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("theta grid is empty")
    if np.any(np.diff(g) <= 0):
        raise ValueError("theta grid must be strictly ascending")
    if g[0] != 1.0 / num_classes:
        raise ValueError(f"theta grid must start at 1/C = {1.0 / num_classes!r}, got {g[0]!r}")
    if g[-1] > 1.0:
        raise ValueError("theta grid must not exceed 1")
    return g


@dataclass
class UIoUCurve:
    """UIoU as a function of the confidence threshold."""

    thetas: np.ndarray
    class_names: tuple[str, ...]
    counts: np.ndarray  # (G, C, 5) int64: tp, fp, fn, ti, fi
    invalidated: np.ndarray  # (G,) pixels mapped to the invalid label, all pixels
    per_class: np.ndarray = field(init=False)
    mean: np.ndarray = field(init=False)

    def __post_init__(self):
        G, C, _ = self.counts.shape
        self.per_class = np.stack([self.tallies(i).uiou() for i in range(G)]) if G else np.zeros((0, C))
        self.mean = np.array([math.fsum(r[~np.isnan(r)]) / np.count_nonzero(~np.isnan(r))
                              if not np.all(np.isnan(r)) else np.nan for r in self.per_class])

    def __len__(self) -> int:
        return len(self.thetas)

    def tallies(self, i: int) -> ConfusionTallies:
        c = self.counts[i]
        return ConfusionTallies(c[:, 0], c[:, 1], c[:, 2], c[:, 3], c[:, 4], float(self.thetas[i]))

    @property
    def best_index(self) -> int:
        """Index of the maximum mean UIoU; the smallest theta wins ties."""
        if np.all(np.isnan(self.mean)):
            raise EmptyEvaluationError("empty evaluation")
        return int(np.nanargmax(self.mean))

    @property
    def best(self) -> tuple[float, float]:
        """``(theta*, max mean UIoU)``."""
        i = self.best_index
        return float(self.thetas[i]), float(self.mean[i])

    @property
    def iou(self) -> float:
        """Standard mean IoU, read off the leftmost point."""
        return float(self.mean[0])


class SweepAccumulator:
    """Dataset-wide tallies for every threshold of a grid in one pass per image.

    Each labeled pixel is binned by the first grid index at which it turns
    invalid; cumulative sums over those bins give the tallies at every
    threshold. Per-image histograms are integer counts, so merge order never
    changes the result.
    """

    def __init__(self, classes: ClassSet, grid=None):
        self.classes = classes
        C = classes.num_classes
        self.grid = check_grid(default_grid(C) if grid is None else grid, C)
        G = len(self.grid)
        self._bins = G + 1
        # grid points at or below 1/C never invalidate anything
        self._floor = int(np.searchsorted(self.grid, 1.0 / C, side="right"))
        self.hist = np.zeros((5, C, self._bins), dtype=np.int64)
        self.inv_hist = np.zeros(self._bins, dtype=np.int64)
        self.images = 0

    def first_invalid_index(self, conf) -> np.ndarray:
        f = np.searchsorted(self.grid, np.asarray(conf, dtype=np.float64), side="right")
        return np.maximum(f, self._floor)

    def add(self, gt, mask, labels, conf) -> None:
        """Add one image given its argmax labels and confidence map."""
        check_same_shape(gt, mask, labels, conf, names=("gt", "mask", "labels", "confidence"))
        C = self.classes.num_classes
        B = self._bins
        gt = np.asarray(gt)
        labels = np.asarray(labels)
        mask = np.asarray(mask)
        f = self.first_invalid_index(conf)
        self.inv_hist += np.bincount(f.ravel(), minlength=B)
        labeled = gt != self.classes.ignore_value
        g = gt[labeled].astype(np.int64)
        p = labels[labeled].astype(np.int64)
        fl = f[labeled]
        j = mask[labeled]
        if g.size and (g.max() >= C or p.max() >= C):
            raise ValidationError("labels outside the class set (sweeps need argmax labels, not sentinels)")
        gk = g * B + fl
        correct = p == g
        n = C * B
        self.hist[0] += np.bincount(gk[correct], minlength=n).reshape(C, B)
        wrong = ~correct
        self.hist[1] += np.bincount((p * B + fl)[wrong], minlength=n).reshape(C, B)
        self.hist[2] += np.bincount(gk[wrong], minlength=n).reshape(C, B)
        inv = j == 1
        self.hist[3] += np.bincount(gk[inv], minlength=n).reshape(C, B)
        self.hist[4] += np.bincount(gk[~inv], minlength=n).reshape(C, B)
        self.images += 1

    def add_soft(self, gt, mask, soft) -> None:
        soft = np.asarray(soft)
        if soft.shape[0] != self.classes.num_classes:
            raise ValidationError(f"soft prediction has {soft.shape[0]} channels, class set has {self.classes.num_classes}")
        self.add(gt, mask, soft.argmax(axis=0), soft.max(axis=0))

    def merge(self, other: "SweepAccumulator") -> "SweepAccumulator":
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("cannot merge sweeps over different grids")
        self.hist += other.hist
        self.inv_hist += other.inv_hist
        self.images += other.images
        return self

    def curve(self) -> UIoUCurve:
        G = len(self.grid)
        # valid at grid index i  <=>  first-invalid bin > i
        still_valid = np.cumsum(self.hist[:3, :, ::-1], axis=2)[:, :, ::-1][:, :, 1:G + 1]
        turned_invalid = np.cumsum(self.hist[3:], axis=2)[:, :, :G]
        counts = np.concatenate([still_valid, turned_invalid], axis=0).transpose(2, 1, 0)
        invalidated = np.cumsum(self.inv_hist)[:G]
        return UIoUCurve(self.grid.copy(), self.classes.names, np.ascontiguousarray(counts), invalidated)


def exact_grid(confidences: Iterable[np.ndarray], num_classes: int) -> np.ndarray:
    """1/C plus every distinct observed confidence above it."""
    lo = 1.0 / num_classes
    vals = [np.unique(np.asarray(c, dtype=np.float64)) for c in confidences]
    u = np.unique(np.concatenate(vals)) if vals else np.zeros(0)
    u = u[(u > lo) & (u <= 1.0)]
    return np.concatenate([[lo], u])


def uiou_curve(softs: Sequence, gts: Sequence, masks: Sequence, classes: ClassSet,
               theta_grid=None, exact: bool = False) -> UIoUCurve:
    """Mean and per-class UIoU across a threshold grid for a whole dataset.

    With ``exact=True`` the grid is every distinct confidence in the data, so
    the reported maximum is the true maximum over all thresholds.
    """
    if not (len(softs) == len(gts) == len(masks)):
        raise ValueError("softs, gts and masks must have equal length")
    C = classes.num_classes
    if exact:
        theta_grid = exact_grid((np.asarray(s).max(axis=0) for s in softs), C)
    acc = SweepAccumulator(classes, theta_grid)
    for soft, gt, mask in zip(softs, gts, masks):
        acc.add_soft(as_labels(gt, classes), as_mask(mask), soft)
    return acc.curve()


def evaluate_hard(gts: Sequence, masks: Sequence, preds: Sequence, classes: ClassSet) -> ConfusionTallies:
    """Dataset tallies for fixed hard predictions (may contain ``INVALID``)."""
    total = ConfusionTallies.zeros(classes.num_classes)
    for gt, mask, pred in zip(gts, masks, preds, strict=True):
        total = total + accumulate_confusion(as_labels(gt, classes), as_mask(mask),
                                             as_labels(pred, classes, allow_invalid=True), classes)
    return total


@dataclass
class Theorem1Report:
    """Check of the "UIoU beats IoU" guarantee on a concrete dataset.

    The guarantee needs (a) a confidence gap: every labeled invalid-region
    pixel has confidence <= ``theta1`` and every labeled valid-region pixel
    >= ``theta2`` with ``theta1 < theta2``; and (b) for class c, some
    invalid-region pixel that is a false negative or false positive of c
    under the plain argmax. UIoU is evaluated at ``theta_eval``, a threshold
    inside ``(theta1, theta2]`` that invalidates exactly the invalid-region
    pixels.
    """

    theta1: float | None
    theta2: float | None
    theta_eval: float | None
    separation_holds: bool
    witness: np.ndarray  # (C,) bool
    iou: np.ndarray
    uiou: np.ndarray  # at theta_eval; NaN when not evaluated
    inequality_verified: dict[int, bool]
    reason: str = ""
    # witnessed classes with no true positive and no true invalid: both
    # metrics are 0 there, so the strict inequality cannot hold
    zero_overlap: list[int] = field(default_factory=list)

    @property
    def assumptions_hold(self) -> np.ndarray:
        return self.witness & self.separation_holds

    @property
    def classes_with_witness(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.witness)]

    @property
    def violations(self) -> list[int]:
        return [c for c, ok in self.inequality_verified.items() if not ok]

    @property
    def unexplained_violations(self) -> list[int]:
        """Violations outside the zero-overlap case; always empty for a correct tally."""
        return [c for c in self.violations if c not in self.zero_overlap]


def verify_theorem1(softs: Sequence, gts: Sequence, masks: Sequence, classes: ClassSet) -> Theorem1Report:
    C = classes.num_classes
    conf_inv, conf_val = [], []
    witness = np.zeros(C, dtype=bool)
    base = ConfusionTallies.zeros(C, theta=1.0 / C)
    prepared = []
    for soft, gt, mask in zip(softs, gts, masks, strict=True):
        soft = np.asarray(soft)
        gt = as_labels(gt, classes)
        mask = as_mask(mask)
        check_same_shape(soft, gt, mask, names=("soft", "gt", "mask"))
        labels = soft.argmax(axis=0)
        conf = soft.max(axis=0).astype(np.float64)
        labeled = gt != classes.ignore_value
        inv = labeled & (mask == 1)
        conf_inv.append(conf[inv])
        conf_val.append(conf[labeled & (mask == 0)])
        miss = inv & (labels != gt)
        witness[np.unique(gt[miss])] = True  # false negatives of the true class
        witness[np.unique(labels[miss])] = True  # false positives of the predicted class
        base = base + accumulate_confusion(gt, mask, labels.astype(np.uint8), classes, theta=1.0 / C)
        prepared.append((soft, gt, mask))

    ci = np.concatenate(conf_inv) if conf_inv else np.zeros(0)
    cv = np.concatenate(conf_val) if conf_val else np.zeros(0)
    iou = base.uiou()
    nan = np.full(C, np.nan)
    if ci.size == 0:
        return Theorem1Report(None, None, None, False, witness, iou, nan, {},
                              reason="no labeled pixels inside invalid regions")
    theta1 = float(ci.max())
    theta2 = float(cv.min()) if cv.size else float("inf")
    if not theta1 < theta2:
        return Theorem1Report(theta1, theta2, None, False, witness, iou, nan, {},
                              reason="confidences of valid and invalid regions overlap")
    hi = min(theta2, 1.0)
    theta_eval = 0.5 * (theta1 + hi)
    if not theta1 < theta_eval <= hi:
        theta_eval = hi
    if not theta1 < theta_eval:
        return Theorem1Report(theta1, theta2, None, False, witness, iou, nan, {},
                              reason="no threshold in [1/C, 1] separates the regions")
    t = ConfusionTallies.zeros(C, theta=theta_eval)
    for soft, gt, mask in prepared:
        t = t + accumulate_confusion(gt, mask, threshold_apply(soft, theta_eval), classes, theta=theta_eval)
    uiou = t.uiou()
    verified = {int(c): bool(uiou[c] > iou[c]) for c in np.flatnonzero(witness)}
    zero = [c for c in verified if t.tp[c] + t.ti[c] == 0]
    for c, ok in verified.items():
        if not ok and c not in zero:
            log.warning("UIoU(%.4g) <= IoU for class %s despite both hypotheses holding", theta_eval, classes.names[c])
    return Theorem1Report(theta1, theta2, theta_eval, True, witness, iou, uiou, verified, zero_overlap=zero)
