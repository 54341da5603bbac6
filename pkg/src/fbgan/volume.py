"""3D HU volumes and their on-disk format.

A volume is stored as two files: ``<stem>.vol`` holding the raw voxel data
as little-endian IEEE-754 binary32 in C order (z, y, x), and ``<stem>.json``,
a human-readable sidecar with shape, spacing and modality metadata. The pair
round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, StorageError, ValidationError

FORMAT_VERSION = "fbgan-vol/1"
MODALITIES = ("CT", "CBCT", "SYNTH")

AIR_HU = -1000.0


@dataclass
class Volume:
    """A 3D scalar grid in Hounsfield units, indexed (z, y, x).

    ``data`` is kept as contiguous float32 so that in-memory values and the
    on-disk representation agree exactly.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "CT"
    fov_radius_px: float | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got {arr.ndim}D")
        if min(arr.shape) < 1:
            raise ValidationError(f"all dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite values")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.fov_radius_px is not None:
            self.fov_radius_px = float(self.fov_radius_px)
            if self.fov_radius_px < 0:
                raise ValidationError("fov_radius_px must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, modality: str | None = None) -> "Volume":
        """Copy of this volume with new voxel data and otherwise equal metadata."""
        return replace(self, data=data, modality=modality or self.modality)

    def equal(self, other: "Volume") -> bool:
        """Bit-exact data equality plus field-exact metadata equality."""
        return (
            self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
            and self.spacing == other.spacing
            and self.modality == other.modality
            and self.fov_radius_px == other.fov_radius_px
        )


def _paths(path) -> tuple[Path, Path]:
    stem = Path(path)
    if stem.suffix in (".vol", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".vol"), stem.with_suffix(".json")


def save_volume(vol: Volume, path) -> None:
    """Write ``<path>.vol`` and ``<path>.json``. ``path`` is the file stem."""
    vol_path, json_path = _paths(path)
    sidecar = {
        "format": FORMAT_VERSION,
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "modality": vol.modality,
        "fov_radius_px": vol.fov_radius_px,
    }
    try:
        with open(vol_path, "wb") as f:
            f.write(vol.data.astype("<f4", copy=False).tobytes(order="C"))
        with open(json_path, "w") as f:
            json.dump(sidecar, f, indent=1)
            f.write("\n")
    except OSError as e:
        raise StorageError(f"cannot write volume to {vol_path}: {e}") from e


def load_volume(path) -> Volume:
    """Read a volume pair written by :func:`save_volume`."""
    vol_path, json_path = _paths(path)
    if not json_path.exists():
        raise FormatError(f"missing sidecar {json_path}")
    if not vol_path.exists():
        raise FormatError(f"missing payload {vol_path}")
    try:
        with open(json_path) as f:
            sidecar = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable sidecar {json_path}: {e}") from e

    if sidecar.get("format") != FORMAT_VERSION:
        raise FormatError(
            f"{json_path}: format {sidecar.get('format')!r}, expected {FORMAT_VERSION!r}"
        )
    try:
        shape = tuple(int(n) for n in sidecar["shape"])
        spacing = tuple(float(s) for s in sidecar["spacing"])
        modality = sidecar["modality"]
        fov_radius_px = sidecar.get("fov_radius_px")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{json_path}: bad sidecar fields: {e}") from e

    try:
        payload = vol_path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {vol_path}: {e}") from e
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise CorruptionError(
            f"{vol_path}: payload is {len(payload)} bytes, sidecar shape {shape} requires {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{vol_path}: payload contains non-finite values")
    return Volume(data=data, spacing=spacing, modality=modality, fov_radius_px=fov_radius_px)
