"""Synthetic CT/CBCT phantom pairs.

A CT phantom is an ellipsoidal soft-tissue body in air with ellipsoidal
inclusions. Its CBCT counterpart is the same anatomy degraded inside the
body mask by a global HU shift, a radial cupping bias, angular streaks and
Gaussian noise, which reproduces the dominant cone-beam artifact families
without any projection physics. Pairs are born voxel-aligned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .volume import AIR_HU, Volume, save_volume

MANIFEST_NAME = "phantom_manifest.json"


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]  # (z, y, x) voxel coordinates
    radii: tuple[float, float, float]
    hu: float

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.radii = tuple(float(r) for r in self.radii)
        self.hu = float(self.hu)
        if len(self.center) != 3 or len(self.radii) != 3:
            raise ValidationError("ellipsoid center and radii must be 3-vectors")
        if any(r <= 0 for r in self.radii):
            raise ValidationError(f"ellipsoid radii must be positive, got {self.radii}")
        if not -1000.0 <= self.hu <= 1000.0:
            raise ValidationError(f"inclusion HU must be in [-1000, 1000], got {self.hu}")

    def volume_vox(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radii[0] * self.radii[1] * self.radii[2]

    def contains(self, z, y, x) -> np.ndarray:
        cz, cy, cx = self.center
        rz, ry, rx = self.radii
        return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


# Body ellipsoid semi-axes as fractions of the half-extent per axis.
BODY_FRACTIONS = (0.95, 0.78, 0.86)


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int]
    body_hu: float = 40.0
    inclusions: list[Ellipsoid] = field(default_factory=list)
    background_hu: float = AIR_HU
    seed: int = 0
    texture_sd: float = 0.0  # optional HU texture inside the body, 0 keeps tissue values exact

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValidationError(f"shape must be 3 positive ints, got {self.shape}")
        if self.texture_sd < 0:
            raise ValidationError("texture_sd must be >= 0")
        for inc in self.inclusions:
            for c, r, n in zip(inc.center, inc.radii, self.shape):
                if c - r < -0.5 or c + r > n - 0.5:
                    raise ValidationError(
                        f"inclusion at {inc.center} with radii {inc.radii} exceeds grid {self.shape}"
                    )

    def body_ellipsoid(self) -> Ellipsoid:
        nz, ny, nx = self.shape
        center = ((nz - 1) / 2, (ny - 1) / 2, (nx - 1) / 2)
        radii = tuple(max(f * n / 2, 0.5) for f, n in zip(BODY_FRACTIONS, self.shape))
        return Ellipsoid(center=center, radii=radii, hu=self.body_hu)


@dataclass
class ArtifactParams:
    """Degradation model applied inside the body mask.

    ``global_shift`` darkens the whole body, ``cupping_amp`` adds a radial
    parabola that vanishes at the axis and peaks at the rim, ``streak_amp``
    adds an angular sinusoid with a per-slice random phase, and ``noise_sd``
    adds Gaussian noise. Air voxels are never touched.
    """

    global_shift: float = -76.0
    cupping_amp: float = 0.0
    streak_amp: float = 0.0
    streak_count: int = 8
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("global_shift", "cupping_amp", "streak_amp", "noise_sd"):
            v = float(getattr(self, name))
            setattr(self, name, v)
            if not np.isfinite(v):
                raise ValidationError(f"{name} must be finite")
        if self.cupping_amp < 0 or self.streak_amp < 0 or self.noise_sd < 0:
            raise ValidationError("artifact amplitudes must be >= 0")
        self.streak_count = int(self.streak_count)
        if self.streak_count < 1:
            raise ValidationError("streak_count must be a positive integer")


def make_ct_phantom(spec: PhantomSpec) -> Volume:
    """Rasterize the spec: innermost containing ellipsoid wins, body else, air outside."""
    nz, ny, nx = spec.shape
    z, y, x = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    data = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    body = spec.body_ellipsoid()
    body_mask = body.contains(z, y, x)
    data[body_mask] = spec.body_hu

    # Paint large ellipsoids first so the smallest (innermost) one sets the voxel.
    for inc in sorted(spec.inclusions, key=lambda e: -e.volume_vox()):
        data[inc.contains(z, y, x)] = inc.hu

    if spec.texture_sd > 0:
        rng = np.random.default_rng(spec.seed)
        data[body_mask] += rng.normal(0.0, spec.texture_sd, int(body_mask.sum()))

    return Volume(data=data.astype(np.float32), modality="CT")


def body_mask_of(vol: Volume) -> np.ndarray:
    """Voxels that are not air. Inclusions at exactly air HU count as air."""
    return vol.data > AIR_HU + 0.5


def degrade_to_cbct(ct: Volume, p: ArtifactParams) -> Volume:
    """Apply the artifact model to a CT volume, producing its CBCT twin."""
    nz, ny, nx = ct.shape
    mask = body_mask_of(ct)

    cy, cx = (ny - 1) / 2, (nx - 1) / 2
    yy, xx = np.meshgrid(np.arange(ny, dtype=np.float64), np.arange(nx, dtype=np.float64), indexing="ij")
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (min(ny, nx) / 2) ** 2
    theta = np.arctan2(yy - cy, xx - cx)

    rng = np.random.default_rng(p.seed)
    bias = np.empty((nz, ny, nx), dtype=np.float64)
    bias[:] = p.global_shift + p.cupping_amp * r2
    if p.streak_amp > 0:
        phase = rng.uniform(0.0, 2 * np.pi, nz)
        bias += p.streak_amp * np.sin(p.streak_count * theta[None, :, :] + phase[:, None, None])
    if p.noise_sd > 0:
        bias += rng.normal(0.0, p.noise_sd, (nz, ny, nx))

    data = ct.data.astype(np.float64)
    data[mask] += bias[mask]
    out = ct.with_data(data.astype(np.float32), modality="CBCT")
    return out


def _fit_ellipsoid(center, radii, shape, hu) -> Ellipsoid | None:
    """Shrink radii so the ellipsoid fits the grid; None when it degenerates."""
    fitted = []
    for c, r, n in zip(center, radii, shape):
        r = min(r, c + 0.5, n - 0.5 - c)
        if r < 0.5:
            return None
        fitted.append(r)
    return Ellipsoid(center=tuple(center), radii=tuple(fitted), hu=hu)


def random_phantom_spec(shape, seed: int, texture_sd: float = 0.0) -> tuple[PhantomSpec, tuple[int, int, int]]:
    """A randomized anatomy: central prostate analogue plus a few varied inclusions.

    Returns the spec and the prostate-analogue center, which evaluation uses
    as the ROI anchor.
    """
    rng = np.random.default_rng(seed)
    nz, ny, nx = (int(n) for n in shape)
    cz, cy, cx = (nz - 1) / 2, (ny - 1) / 2, (nx - 1) / 2

    inclusions = []
    # Prostate analogue: near the body center, slightly darker than body tissue.
    pc = (
        cz + rng.uniform(-0.05, 0.05) * nz,
        cy + rng.uniform(-0.04, 0.04) * ny,
        cx + rng.uniform(-0.04, 0.04) * nx,
    )
    pr = (
        max(1.0, 0.16 * nz * rng.uniform(0.8, 1.2)),
        0.11 * ny * rng.uniform(0.8, 1.2),
        0.11 * nx * rng.uniform(0.8, 1.2),
    )
    inclusions.append(_fit_ellipsoid(pc, pr, shape, rng.uniform(15.0, 35.0)))

    # Rectal gas analogue behind the prostate.
    if rng.random() < 0.9:
        gc = (pc[0], min(cy + 0.18 * ny, ny - 1 - 0.09 * ny), pc[2] + rng.uniform(-0.03, 0.03) * nx)
        gr = (max(1.0, 0.10 * nz), 0.07 * ny * rng.uniform(0.7, 1.3), 0.08 * nx * rng.uniform(0.7, 1.3))
        inclusions.append(_fit_ellipsoid(gc, gr, shape, rng.uniform(-650.0, -350.0)))

    # Femoral head analogues left and right.
    for sx in (-1.0, 1.0):
        bc = (cz, cy + rng.uniform(-0.02, 0.02) * ny, cx + sx * 0.26 * nx)
        br = (max(1.0, 0.22 * nz), 0.08 * ny * rng.uniform(0.8, 1.2), 0.08 * nx * rng.uniform(0.8, 1.2))
        inclusions.append(_fit_ellipsoid(bc, br, shape, rng.uniform(400.0, 800.0)))

    # A couple of random soft-tissue blobs.
    for _ in range(rng.integers(1, 4)):
        bc = (
            cz + rng.uniform(-0.2, 0.2) * nz,
            cy + rng.uniform(-0.18, 0.18) * ny,
            cx + rng.uniform(-0.18, 0.18) * nx,
        )
        br = (max(1.0, 0.10 * nz), 0.05 * ny * rng.uniform(0.6, 1.6), 0.05 * nx * rng.uniform(0.6, 1.6))
        inclusions.append(_fit_ellipsoid(bc, br, shape, rng.uniform(-120.0, 120.0)))
    inclusions = [inc for inc in inclusions if inc is not None]

    spec = PhantomSpec(
        shape=(nz, ny, nx),
        inclusions=inclusions,
        seed=int(rng.integers(0, 2**31 - 1)),
        texture_sd=texture_sd,
    )
    prostate_center = tuple(int(round(c)) for c in pc)
    return spec, prostate_center


def generate_pairs(
    out_dir,
    n_pairs: int,
    shape,
    seed: int,
    artifacts: ArtifactParams,
    texture_sd: float = 0.0,
    jitter: bool = False,
) -> dict:
    """Generate aligned CT/CBCT pairs plus a manifest describing them.

    With ``jitter`` the CBCT is shifted by up to one voxel in-plane to mimic
    residual registration error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(int(n_pairs)):
        pair_seed = int(rng.integers(0, 2**31 - 1))
        spec, prostate_center = random_phantom_spec(shape, pair_seed, texture_sd)
        ct = make_ct_phantom(spec)
        cbct = degrade_to_cbct(ct, replace(artifacts, seed=pair_seed ^ 0x5EED))
        if jitter:
            dy, dx = rng.integers(-1, 2, 2)
            cbct = cbct.with_data(np.roll(cbct.data, (int(dy), int(dx)), axis=(1, 2)))
        ct_stem, cbct_stem = f"ct_{i:04d}", f"cbct_{i:04d}"
        save_volume(ct, out_dir / ct_stem)
        save_volume(cbct, out_dir / cbct_stem)
        pairs.append(
            {
                "id": i,
                "ct": ct_stem,
                "cbct": cbct_stem,
                "seed": pair_seed,
                "prostate_center": list(prostate_center),
            }
        )
    manifest = {
        "version": 1,
        "seed": int(seed),
        "shape": [int(n) for n in shape],
        "texture_sd": float(texture_sd),
        "artifacts": {
            "global_shift": artifacts.global_shift,
            "cupping_amp": artifacts.cupping_amp,
            "streak_amp": artifacts.streak_amp,
            "streak_count": artifacts.streak_count,
            "noise_sd": artifacts.noise_sd,
        },
        "jitter": bool(jitter),
        "pairs": pairs,
    }
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"no {MANIFEST_NAME} in {data_dir}")
    with open(path) as f:
        return json.load(f)
