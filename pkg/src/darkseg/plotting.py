"""Figures for threshold sweeps."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_uiou_curves(curves, path, labels=None, title=None):
    """Mean UIoU (%) against the confidence threshold, one line per curve.

    The maximum of each curve is marked in black and annotated with its
    value; the leftmost point of each line is the plain mean IoU. The file
    format follows the suffix of `path` (``.svg``, ``.png``, ``.pdf``).
    """
    if not isinstance(curves, (list, tuple)):
        curves = [curves]
    labels = labels or [None] * len(curves)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    lo = min(float(c.thetas[0]) for c in curves)
    for curve, label in zip(curves, labels):
        ax.plot(curve.thetas, 100.0 * curve.mean, lw=1.8, label=label)
        t, m = curve.best
        ax.plot([t], [100.0 * m], "o", color="black", ms=5, zorder=3)
        ax.annotate(f"{100.0 * m:.1f}", (t, 100.0 * m), textcoords="offset points", xytext=(0, 6),
                    ha="center", fontsize=9)
    ax.set_xlim(lo, 1.0)
    ax.set_xlabel(r"confidence threshold $\theta$")
    ax.set_ylabel("mean UIoU (%)")
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    if any(labels):
        ax.legend(loc="lower left", frameon=False)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    meta = {"Date": None} if str(path).endswith(".svg") else None
    with plt.rc_context({"svg.hashsalt": "darkseg"}):
        fig.savefig(path, metadata=meta)
    plt.close(fig)
    return Path(path)
