"""
MVL1 volume files and the CSV manifest that indexes them.

Layout (little endian): magic ``MVL1``, u8 dtype (0 = float32, 1 = uint8
labels), u32 W, H, D, C, three float32 spacings in mm, then the payload with
x varying fastest, then y, z and c.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ConfigurationError, FileFormatError

MAGIC = b"MVL1"
DEFAULT_SPACING = (0.7, 0.7, 7.0)
_HEADER = struct.Struct("<4sBIIII3f")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MANIFEST_COLUMNS = ("path", "subject_id", "side", "cohort", "label_path")
SIDES = ("left", "right", "both")
COHORTS = ("healthy", "diseased")


@dataclass
class Volume:
    """Image (float) or label (uint8) data on a W x H x D grid with mm spacing."""

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING
    subject_id: str = ""
    side: Optional[str] = None

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigurationError(f"spacing must be three positive values, got {self.spacing}")
        if self.data.ndim not in (3, 4):
            raise ConfigurationError(f"volume data must be 3-D or 4-D, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def write_volume(path, data: np.ndarray, spacing=DEFAULT_SPACING) -> None:
    """Integer data is written as uint8 labels, everything else as float32."""
    data = np.asarray(data)
    code = 1 if np.issubdtype(data.dtype, np.integer) or data.dtype == bool else 0
    if code == 1 and data.size and (data.min() < 0 or data.max() > 255):
        raise ConfigurationError("label volumes must hold values in 0..255")
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise ConfigurationError(f"expected 3-D or 4-D data, got shape {data.shape}")
    if code == 0 and not np.all(np.isfinite(data)):
        raise ConfigurationError("volume data must be finite")
    W, H, D, C = data.shape
    payload = data.astype(_DTYPES[code]).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, code, W, H, D, C, *spacing))
        fh.write(payload)


def read_volume(path) -> tuple:
    """Returns ``(data, spacing)``; single-channel files come back 3-D."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FileFormatError(f"{path}: truncated header")
        magic, code, W, H, D, C, sx, sy, sz = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        if code not in _DTYPES:
            raise FileFormatError(f"{path}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = W * H * D * C
        payload = fh.read(n * dt.itemsize)
        if len(payload) != n * dt.itemsize:
            raise FileFormatError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype=dt).reshape((W, H, D, C), order="F")
    data = data.astype(dt.newbyteorder("="))
    if C == 1:
        data = data[..., 0]
    return data, (sx, sy, sz)


def load_volume(path, subject_id: str = "", side: Optional[str] = None) -> Volume:
    data, spacing = read_volume(path)
    return Volume(data, spacing, subject_id, side)


@dataclass
class ManifestEntry:
    path: str
    subject_id: str
    side: str
    cohort: str
    label_path: str = ""

    def __post_init__(self):
        if self.side not in SIDES:
            raise ConfigurationError(f"manifest side must be one of {SIDES}, got {self.side!r}")
        if self.cohort not in COHORTS:
            raise ConfigurationError(f"manifest cohort must be one of {COHORTS}, got {self.cohort!r}")


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            w.writerow([e.path, e.subject_id, e.side, e.cohort, e.label_path])


def read_manifest(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS[:4]) - set(reader.fieldnames or ())
        if missing:
            raise FileFormatError(f"{path}: manifest lacks columns {sorted(missing)}")
        return [ManifestEntry(r["path"], r["subject_id"], r["side"], r["cohort"],
                              r.get("label_path") or "") for r in reader]


def resolve(manifest_path, relative: str) -> Path:
    """Manifest paths are relative to the manifest's directory."""
    p = Path(relative)
    return p if p.is_absolute() else Path(manifest_path).parent / p
