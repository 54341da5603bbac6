"""FOV cropping, HU windowing, normalization and dataset splitting.

Networks operate on 2D slices in [-1, 1]; volumes are converted slice by
slice. Normalization is the affine map of a clip window onto [-1, 1], and
``denormalize`` is its exact inverse on that window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .volume import AIR_HU, Volume


@dataclass
class SliceBatch:
    """A batch of normalized slices, shaped (batch, channel, row, col)."""

    data: np.ndarray
    provenance: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ValidationError(f"slice batch must be 4D (N,C,H,W), got {arr.ndim}D")
        n, c, h, w = arr.shape
        if n < 1:
            raise ValidationError("batch must contain at least one slice")
        if c not in (1, 2):
            raise ValidationError(f"channel count must be 1 or 2, got {c}")
        if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
            raise ValidationError("slice values must lie in [-1, 1]")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape


@dataclass
class DatasetSplit:
    train_ids: list
    test_ids: list
    seed: int

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValidationError("train and test ids overlap")


def apply_fov_mask(vol: Volume, radius_px: float, fill: float = AIR_HU) -> Volume:
    """Set voxels outside the in-plane circle of ``radius_px`` to ``fill``.

    The circle is centered on the geometric center of the pixel grid,
    ((ny-1)/2, (nx-1)/2); a voxel changes when its center is strictly
    farther than the radius.
    """
    _, ny, nx = vol.shape
    radius_px = float(radius_px)
    if radius_px < 0:
        raise ValidationError("radius must be >= 0")
    if radius_px > min(ny, nx) / 2:
        raise ValidationError(
            f"radius {radius_px} exceeds half of the smaller in-plane dimension {min(ny, nx)}"
        )
    cy, cx = (ny - 1) / 2, (nx - 1) / 2
    yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    outside = (yy - cy) ** 2 + (xx - cx) ** 2 > radius_px**2
    data = vol.data.copy()
    data[:, outside] = fill
    out = vol.with_data(data)
    out.fov_radius_px = radius_px
    return out


def clip_hu(vol: Volume, lo: float, hi: float) -> Volume:
    if not lo < hi:
        raise ValidationError(f"clip window requires lo < hi, got [{lo}, {hi}]")
    return vol.with_data(np.clip(vol.data, lo, hi))


def normalize(vol: Volume, lo: float, hi: float) -> np.ndarray:
    """Clip to [lo, hi] and map affinely onto [-1, 1]. Returns a float32 (z,y,x) array."""
    if not lo < hi:
        raise ValidationError(f"normalization window requires lo < hi, got [{lo}, {hi}]")
    clipped = np.clip(vol.data.astype(np.float64), lo, hi)
    norm = 2.0 * (clipped - lo) / (hi - lo) - 1.0
    return np.clip(norm, -1.0, 1.0).astype(np.float32)


def denormalize(arr: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Inverse of :func:`normalize` on [-1, 1], back to HU."""
    if not lo < hi:
        raise ValidationError(f"normalization window requires lo < hi, got [{lo}, {hi}]")
    return ((arr.astype(np.float64) + 1.0) / 2.0 * (hi - lo) + lo).astype(np.float32)


def volume_to_slices(norm: np.ndarray, vol_id: str = "") -> SliceBatch:
    """Stack the z slices of a normalized (z,y,x) array into an (N,1,H,W) batch."""
    if norm.ndim != 3:
        raise ValidationError("expected a 3D normalized array")
    data = norm[:, None, :, :]
    provenance = [(vol_id, z) for z in range(norm.shape[0])]
    return SliceBatch(data=data, provenance=provenance)


def slices_to_volume(batch: np.ndarray, template: Volume, lo: float, hi: float) -> Volume:
    """Reassemble (N,1,H,W) network output into a volume in HU units."""
    arr = np.asarray(batch)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValidationError(f"expected (N,1,H,W) slices, got {arr.shape}")
    hu = denormalize(arr[:, 0, :, :], lo, hi)
    return template.with_data(hu, modality="SYNTH")


def split_dataset(pair_ids, ratio_train: float, seed: int) -> DatasetSplit:
    """Deterministic shuffle split with |train| = round-half-up(ratio * N)."""
    ids = list(pair_ids)
    if len(ids) < 2:
        raise ValidationError(f"need at least 2 pairs to split, got {len(ids)}")
    if not 0.0 <= ratio_train <= 1.0:
        raise ValidationError(f"ratio_train must be in [0, 1], got {ratio_train}")
    n_train = int(np.floor(ratio_train * len(ids) + 0.5))
    order = np.random.default_rng(seed).permutation(len(ids))
    train = [ids[i] for i in sorted(order[:n_train])]
    test = [ids[i] for i in sorted(order[n_train:])]
    return DatasetSplit(train_ids=train, test_ids=test, seed=int(seed))
