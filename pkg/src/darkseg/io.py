"""On-disk formats: label rasters, soft tensors, manifests and CSV reports.

Soft tensor files (``.sftp``) are a 16-byte little-endian header followed by
float32 planes, channel-major then row-major::

    magic  b"SFTP"
    u16    format version (1)
    u32    height
    u32    width
    u16    channels
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
from PIL import Image

from .core import NORMALIZATION_TOL, ValidationError, as_mask
from .gps import GpsFix, Match

SOFT_MAGIC = b"SFTP"
SOFT_VERSION = 1
_HEADER = struct.Struct("<4sHIIH")
SOFT_SUFFIX = ".sftp"
LABEL_SUFFIX = ".png"


class FormatError(ValidationError):
    """A file does not follow its declared format."""


# -- label rasters ----------------------------------------------------------

def read_label_png(path) -> np.ndarray:
    """Read an 8-bit single-channel PNG; palettes are ignored (indices kept)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise FormatError(f"{path}: expected an 8-bit single-channel PNG, got mode {im.mode!r}")
        return np.array(im, dtype=np.uint8)


def write_label_png(path, labels, palette=None) -> None:
    a = np.asarray(labels)
    if a.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {a.shape}")
    if a.dtype != np.uint8:
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise ValueError("label values must fit in 8 bits")
        a = a.astype(np.uint8)
    im = Image.fromarray(a, mode="L")
    if palette is not None:
        im = im.convert("P")
        im.putpalette(list(np.asarray(palette, dtype=np.uint8).ravel()))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


def read_mask_png(path) -> np.ndarray:
    """Read an invalid mask; raster value 255 becomes 1."""
    return as_mask(read_label_png(path))


def write_mask_png(path, mask) -> None:
    write_label_png(path, as_mask(mask))


def read_rgb(path) -> np.ndarray:
    """Camera frame (PNG or JPEG) as ``(H, W, 3)`` uint8 sRGB."""
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


# -- soft tensors -----------------------------------------------------------

def soft_to_bytes(soft) -> bytes:
    a = np.asarray(soft)
    if a.ndim != 3:
        raise ValueError(f"soft tensor must be (C, H, W), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("soft tensor contains NaN or Inf")
    C, H, W = a.shape
    return _HEADER.pack(SOFT_MAGIC, SOFT_VERSION, H, W, C) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def soft_from_bytes(buf: bytes, check_sum: bool = True, tol: float = NORMALIZATION_TOL, name="<bytes>") -> np.ndarray:
    """Decode a soft tensor, returning the stored float32 values unchanged."""
    if len(buf) < _HEADER.size:
        raise FormatError(f"{name}: truncated header")
    magic, version, H, W, C = _HEADER.unpack_from(buf)
    if magic != SOFT_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != SOFT_VERSION:
        raise FormatError(f"{name}: unsupported format version {version}")
    need = H * W * C * 4
    got = len(buf) - _HEADER.size
    if got < need:
        raise FormatError(f"{name}: truncated payload ({got} of {need} bytes)")
    if got > need:
        raise FormatError(f"{name}: {got - need} trailing bytes after payload")
    a = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(C, H, W).astype(np.float32)
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{name}: payload contains NaN or Inf")
    if check_sum and a.size:
        dev = np.abs(a.sum(axis=0, dtype=np.float64) - 1.0).max()
        if dev > tol:
            raise FormatError(f"{name}: channel sums deviate from 1 by {dev:.3g} (tolerance {tol})")
    return a


def write_soft(path, soft) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(soft_to_bytes(soft))


def read_soft(path, check_sum: bool = True, tol: float = NORMALIZATION_TOL) -> np.ndarray:
    return soft_from_bytes(Path(path).read_bytes(), check_sum, tol, name=str(path))


# -- manifests ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    label_path: str | None = None
    invalid_mask_path: str | None = None
    domain: str = ""
    gps: GpsFix | None = None
    loss_weight: float | None = None
    origin: str | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "image_path": self.image_path}
        for k in ("label_path", "invalid_mask_path"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.domain:
            d["domain"] = self.domain
        if self.gps is not None:
            d["gps"] = {"lat": self.gps.lat, "lon": self.gps.lon, "timestamp": self.gps.timestamp}
        if self.loss_weight is not None:
            d["loss_weight"] = self.loss_weight
        if self.origin is not None:
            d["origin"] = self.origin
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestRecord":
        try:
            gps = d.get("gps")
            if gps is not None:
                gps = GpsFix(float(gps["lat"]), float(gps["lon"]), float(gps.get("timestamp", 0.0)))
            lw = d.get("loss_weight")
            return cls(
                id=str(d["id"]),
                image_path=str(d["image_path"]),
                label_path=d.get("label_path"),
                invalid_mask_path=d.get("invalid_mask_path"),
                domain=str(d.get("domain", "")),
                gps=gps,
                loss_weight=None if lw is None else float(lw),
                origin=d.get("origin"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad manifest record {d!r}: {e}") from e


@dataclass
class Manifest:
    """Ordered records; relative paths resolve against `root`."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValidationError(f"duplicate manifest id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def gps_items(self) -> list[tuple[str, GpsFix]]:
        missing = [r.id for r in self.records if r.gps is None]
        if missing:
            raise ValidationError(f"{len(missing)} records lack GPS fixes, e.g. {missing[0]!r}")
        return [(r.id, r.gps) for r in self.records]

    def missing_files(self) -> list[tuple[str, Path]]:
        out = []
        for r in self.records:
            for p in (r.image_path, r.label_path, r.invalid_mask_path):
                rp = self.resolve(p)
                if rp is not None and not rp.exists():
                    out.append((r.id, rp))
        return out

    def rebased(self, new_root) -> "Manifest":
        """Same records with paths rewritten relative to `new_root`."""
        new_root = Path(new_root)

        def rel(p):
            if p is None:
                return None
            return _relpath(self.resolve(p), new_root)

        recs = [replace(r, image_path=rel(r.image_path), label_path=rel(r.label_path),
                        invalid_mask_path=rel(r.invalid_mask_path)) for r in self.records]
        return Manifest(recs, new_root)


def _relpath(p: Path, root: Path) -> str:
    return Path(os.path.relpath(Path(p).absolute(), Path(root).absolute())).as_posix()


def manifest_lines(records: Iterable[ManifestRecord]) -> str:
    return "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in records)


def write_manifest(path, manifest: Manifest | Iterable[ManifestRecord]) -> None:
    """JSON lines, one record per line, in record order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    recs = manifest.records if isinstance(manifest, Manifest) else list(manifest)
    path.write_text(manifest_lines(recs))


def read_manifest(path) -> Manifest:
    path = Path(path)
    recs = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{n}: {e}") from e
        recs.append(ManifestRecord.from_json(d))
    return Manifest(recs, path.parent)


# -- CSV ----------------------------------------------------------------------

def fmt(x) -> str:
    """Fixed CSV number format: 6 significant digits, ``nan`` when undefined."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def write_curve_csv(curve, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    names = [n.replace(" ", "_") for n in curve.class_names]
    w.writerow(["theta"] + [f"uiou_{n}" for n in names] + ["mean_uiou", "invalidated_pixels"])
    for i, t in enumerate(curve.thetas):
        w.writerow([fmt(float(t))] + [fmt(float(v)) for v in curve.per_class[i]]
                   + [fmt(float(curve.mean[i])), fmt(int(curve.invalidated[i]))])


def read_curve_csv(fh: TextIO) -> dict[str, np.ndarray]:
    rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    cols = {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(head)}
    return cols


def write_matches_csv(matches: Iterable[Match], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["query_id", "day_id", "distance_m", "matched"])
    for m in matches:
        w.writerow([m.query_id, m.day_id, fmt(m.distance_m), fmt(m.matched)])


def read_matches_csv(fh: TextIO) -> list[Match]:
    r = csv.DictReader(fh)
    return [Match(row["query_id"], row["day_id"], float(row["distance_m"]), row["matched"] == "true") for row in r]


# -- directories ----------------------------------------------------------------

def stems(directory, suffix: str) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return {p.name[: -len(suffix)]: p for p in sorted(d.iterdir()) if p.name.endswith(suffix) and p.is_file()}


def pair_dirs(base, *others) -> list[tuple[str, list[Path]]]:
    """Match files by stem. `base` and `others` are ``(directory, suffix)``.

    Every stem in the base directory must exist in every other directory.
    """
    ref = stems(*base)
    if not ref:
        raise ValidationError(f"no *{base[1]} files in {base[0]}")
    tables = [stems(*o) for o in others]
    out = []
    for s in sorted(ref):
        row = [ref[s]]
        for (d, suf), t in zip(others, tables):
            if s not in t:
                raise ValidationError(f"{s}: missing {s}{suf} in {d}")
            row.append(t[s])
        out.append((s, row))
    return out
