"""Seeded synthetic head-CT phantoms for exercising the full loop.

Every phantom is generated from an integer seed and the parameters below, so
any expected value can be recomputed independently.

Geometry (axis order x, y, z, HU values rounded to integers):
  - air outside an ellipsoidal head: -1000 HU
  - skull-proxy band where 0.94 <= r <= 1.0 of the head ellipsoid (semi-axes
    0.46*nx, 0.46*ny, 0.48*nz voxels): a soft-tissue-level matrix (same
    -20..40 HU distribution as brain) studded with hyperdense specks of
    1150..1350 HU at even (x, y, z) lattice positions. The specks are the
    "> 300 HU" shell for the distance feature. Every 3x3x3 window inside
    the band contains at least one speck (its local variance is guaranteed
    high, nothing in the band mimics the smooth interior of a bleed), and
    specks are never 26-adjacent, so a speck can only ever form a
    single-voxel component that the minimum-size filter removes
  - brain interior (r < 0.94): iid uniform -20..40 HU
  - lesions: ellipsoids fully inside r < 0.72, per-lesion base HU drawn from
    the kind's range, +-5 HU per-voxel jitter; these voxels are the GT mask
  - calcification distractors: spheres small enough (radius 0.8..1.4 mm)
    that every containing window also sees background, per-blob base
    150..400 HU, +-30 HU jitter, never part of the GT mask

Case kinds:
  easy_pos    1-2 deep lesions, base 70..90 HU, radius 4.0..6.5 mm
  subtle_pos  1 deep faint lesion, base 32..44 HU, radius 2.6..3.6 mm
  rim_pos     1 bright lesion hugging the skull band (center at
              0.78 <= r <= 0.86, clipped to r < 0.92), base 70..90 HU,
              radius 3.0..4.5 mm; its windows see band specks, the regime
              models trained only on deep lesions suppress
  neg_clean   no lesion, no distractor
  neg_calc    2-4 calcification blobs
"""

from __future__ import annotations

import numpy as np

from .dicomio import SliceImage, VolumeImage

KINDS = ("easy_pos", "subtle_pos", "rim_pos", "neg_clean", "neg_calc")

DEFAULT_SHAPE = (48, 48, 24)
DEFAULT_SPACING = (1.0, 1.0, 1.0)

UID_ROOT = "1.3.6.1.4.1.61204"  # arbitrary private root for generated series


def _ellipsoid_radius(shape) -> np.ndarray:
    nx, ny, nz = shape
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    ax, ay, az = 0.46 * nx, 0.46 * ny, 0.48 * nz
    x = (np.arange(nx) - cx) / ax
    y = (np.arange(ny) - cy) / ay
    z = (np.arange(nz) - cz) / az
    return np.sqrt(
        x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2
    )


def _place_blob(grid, rng, center_lo, center_hi, clip_r, radius_mm, spacing,
                base_hu, jitter):
    """Stamp one ellipsoidal blob; returns its boolean region."""
    nx, ny, nz = grid.shape
    r_norm = _ellipsoid_radius(grid.shape)
    while True:
        cx = rng.uniform(0.1 * nx, 0.9 * nx)
        cy = rng.uniform(0.1 * ny, 0.9 * ny)
        cz = rng.uniform(0.1 * nz, 0.9 * nz)
        if center_lo <= r_norm[int(cx), int(cy), int(cz)] <= center_hi:
            break
    rx = radius_mm / spacing[0]
    ry = radius_mm * rng.uniform(0.8, 1.2) / spacing[1]
    rz = radius_mm * rng.uniform(0.7, 1.1) / spacing[2]
    x = (np.arange(nx) - cx) / rx
    y = (np.arange(ny) - cy) / ry
    z = (np.arange(nz) - cz) / rz
    inside = (
        x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2
    ) <= 1.0
    inside &= r_norm < clip_r  # keep blobs out of the skull band
    count = int(inside.sum())
    if count:
        grid[inside] = base_hu + rng.uniform(-jitter, jitter, size=count)
    return inside


def make_phantom(
    kind: str,
    seed: int,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
):
    """Returns (VolumeImage, gt_mask, label) for one synthetic case."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    nx, ny, nz = shape
    r = _ellipsoid_radius(shape)

    hu = np.full(shape, -1000.0)
    head = r <= 1.0
    band = (r >= 0.94) & head
    hu[head] = rng.uniform(-20.0, 40.0, size=int(head.sum()))
    speck = (
        (np.arange(nx)[:, None, None] % 2 == 0)
        & (np.arange(ny)[None, :, None] % 2 == 0)
        & (np.arange(nz)[None, None, :] % 2 == 0)
    )
    speck = np.broadcast_to(speck, shape) & band
    hu[speck] = rng.uniform(1150.0, 1350.0, size=int(speck.sum()))

    gt_mask = np.zeros(shape, dtype=bool)
    if kind == "easy_pos":
        for _ in range(rng.integers(1, 3)):
            base = rng.uniform(70.0, 90.0)
            radius = rng.uniform(4.0, 6.5)
            gt_mask |= _place_blob(hu, rng, 0.0, 0.72, 0.85, radius, spacing, base, 5.0)
    elif kind == "subtle_pos":
        base = rng.uniform(32.0, 44.0)
        radius = rng.uniform(2.6, 3.6)
        gt_mask |= _place_blob(hu, rng, 0.0, 0.72, 0.85, radius, spacing, base, 5.0)
    elif kind == "rim_pos":
        base = rng.uniform(70.0, 90.0)
        radius = rng.uniform(3.0, 4.5)
        gt_mask |= _place_blob(hu, rng, 0.78, 0.86, 0.92, radius, spacing, base, 5.0)
    elif kind == "neg_calc":
        for _ in range(rng.integers(2, 5)):
            base = rng.uniform(150.0, 400.0)
            radius = rng.uniform(0.8, 1.4)
            _place_blob(hu, rng, 0.0, 0.80, 0.85, radius, spacing, base, 30.0)

    hu = np.rint(hu)  # integer HU so slice rescale round-trips exactly
    volume = VolumeImage(
        study_uid=f"{UID_ROOT}.1.{seed}",
        series_uid=f"{UID_ROOT}.2.{seed}",
        voxels=hu,
        spacing=spacing,
        origin=(0.0, 0.0, 0.0),
    )
    label = "bleed_positive" if gt_mask.any() else "bleed_negative"
    return volume, gt_mask, label


def volume_to_slices(
    volume: VolumeImage,
    rescale_slope: float = 1.0,
    rescale_intercept: float = -1024.0,
) -> list[SliceImage]:
    """Split a volume back into per-slice files for pushing over the wire."""
    nx, ny, nz = volume.shape
    sx, sy, sz = volume.spacing
    ox, oy, oz = volume.origin
    slices = []
    for k in range(nz):
        hu = volume.voxels[:, :, k].T  # raster rows are y
        stored = np.rint((hu - rescale_intercept) / rescale_slope).astype(np.int16)
        z = oz + k * sz
        slices.append(SliceImage(
            study_uid=volume.study_uid,
            series_uid=volume.series_uid,
            sop_uid=f"{volume.series_uid}.{k + 1}",
            rows=ny,
            cols=nx,
            pixel_spacing=(sy, sx),
            slice_location=z,
            image_position=(ox, oy, z),
            rescale_slope=rescale_slope,
            rescale_intercept=rescale_intercept,
            pixel_data=stored,
        ))
    return slices
