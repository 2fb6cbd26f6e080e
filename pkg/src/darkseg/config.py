"""Toolkit configuration from a JSON file.

The file path comes from the ``--config`` flag or the ``DARKSEG_CONFIG``
environment variable; every section is optional::

    {"classes":   {"names": [...], "dynamic": ["car", ...], "ignore_value": 255},
     "bilateral": {"sigma_s": 80, "sigma_r": 10, "truncation": 2.5, "downsample_factor": 4},
     "fusion":    {"alpha_l": 0.3, "alpha_h": 0.6, "eta": 0.2},
     "evaluate":  {"grid_size": 101},
     "match":     {"max_dist": 50, "smooth_window": 0}}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .bilateral import BilateralParams
from .core import ClassSet, ValidationError
from .gps import DEFAULT_MAX_DIST_M
from .metrics import DEFAULT_GRID_SIZE
from .refine import FusionParams

ENV_VAR = "DARKSEG_CONFIG"


@dataclass
class Config:
    classes: ClassSet = field(default_factory=ClassSet)
    # None: pick the downsample factor from the frame size
    bilateral: BilateralParams | None = None
    fusion: FusionParams = field(default_factory=FusionParams)
    grid_size: int = DEFAULT_GRID_SIZE
    max_dist: float = DEFAULT_MAX_DIST_M
    smooth_window: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {"classes", "bilateral", "fusion", "evaluate", "match"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                classes=ClassSet.from_dict(d["classes"]) if "classes" in d else ClassSet(),
                bilateral=BilateralParams(**d["bilateral"]) if "bilateral" in d else None,
                fusion=FusionParams(**d.get("fusion", {})),
                grid_size=int(d.get("evaluate", {}).get("grid_size", DEFAULT_GRID_SIZE)),
                max_dist=float(d.get("match", {}).get("max_dist", DEFAULT_MAX_DIST_M)),
                smooth_window=int(d.get("match", {}).get("smooth_window", 0)),
            )
        except TypeError as e:
            raise ValidationError(f"bad config: {e}") from e


def load_config(path=None) -> Config:
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return Config()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: {e}") from e
    return Config.from_dict(d)
