"""GPS nearest-neighbour correspondence between dark and daytime frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import median_filter

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_MAX_DIST_M = 50.0


@dataclass(frozen=True)
class GpsFix:
    lat: float
    lon: float
    timestamp: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


def haversine(a: GpsFix, b: GpsFix) -> float:
    """Great-circle distance in meters."""
    return float(haversine_many(a.lat, a.lon, np.array([b.lat]), np.array([b.lon]))[0])


def haversine_many(lat, lon, lats, lons) -> np.ndarray:
    """Distances in meters from one point to many (or elementwise)."""
    p1, p2 = np.radians(lat), np.radians(lats)
    dphi = p2 - p1
    dlmb = np.radians(lons) - np.radians(lon)
    # symmetric in its arguments, so d(a, b) == d(b, a) bit for bit
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


@dataclass(frozen=True)
class Match:
    query_id: str
    day_id: str
    distance_m: float
    matched: bool


class EmptyReferenceError(ValueError):
    pass


def smooth_track(fixes: Sequence[GpsFix], window: int = 5) -> list[GpsFix]:
    """Sliding-window median of latitude and longitude along a track."""
    if len(fixes) < 2 or window <= 1:
        return list(fixes)
    lat = median_filter(np.array([f.lat for f in fixes]), size=window, mode="nearest")
    lon = median_filter(np.array([f.lon for f in fixes]), size=window, mode="nearest")
    return [GpsFix(float(a), float(o), f.timestamp) for a, o, f in zip(lat, lon, fixes)]


def match_nearest(queries: Sequence[tuple[str, GpsFix]], day_refs: Sequence[tuple[str, GpsFix]],
                  max_dist: float = DEFAULT_MAX_DIST_M, chunk: int = 256) -> list[Match]:
    """Assign every query its nearest daytime reference by haversine distance.

    Exhaustive search (chunked over queries). Equal distances go to the
    reference with the earlier timestamp, then to the earlier one in input
    order. Matches farther than `max_dist` are kept but flagged unmatched.
    """
    if not day_refs:
        raise EmptyReferenceError("no daytime references to match against")
    ref_ids = [r[0] for r in day_refs]
    rlat = np.array([r[1].lat for r in day_refs], dtype=np.float64)
    rlon = np.array([r[1].lon for r in day_refs], dtype=np.float64)
    rts = np.array([r[1].timestamp for r in day_refs], dtype=np.float64)
    # stable tie order: timestamp, then position
    order = np.lexsort((np.arange(len(day_refs)), rts))
    rlat, rlon = rlat[order], rlon[order]
    out = []
    for s in range(0, len(queries), chunk):
        block = queries[s:s + chunk]
        qlat = np.array([q[1].lat for q in block])[:, None]
        qlon = np.array([q[1].lon for q in block])[:, None]
        d = haversine_many(qlat, qlon, rlat[None, :], rlon[None, :])
        best = np.argmin(d, axis=1)  # first minimum in tie order
        for (qid, _), j, row in zip(block, best, d):
            dist = float(row[j])
            out.append(Match(qid, ref_ids[order[j]], dist, dist <= max_dist))
    return out

