"""Per-voxel feature extraction for the reference classifier.

Five features per voxel, all HU-derived:

    0  hu                  raw HU value
    1  local_mean_r1       mean over the 3x3x3 neighborhood (replicate-clamped
                           at the volume edge)
    2  local_std_r1        standard deviation over the same neighborhood
    3  gradient_magnitude  |grad HU| in HU/mm (central differences, one-sided
                           at the edge)
    4  dist_to_boundary    mm to the nearest hyperdense shell voxel (> 300 HU,
                           a skull proxy) or volume edge, whichever is closer
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .dicomio import VolumeImage

FEATURE_NAMES = ["hu", "local_mean_r1", "local_std_r1",
                 "gradient_magnitude", "dist_to_boundary"]
N_FEATURES = len(FEATURE_NAMES)

SHELL_HU_THRESHOLD = 300.0


def extract_features(volume: VolumeImage) -> np.ndarray:
    """Returns a float64 grid of shape volume.shape + (5,)."""
    hu = np.asarray(volume.voxels, dtype=np.float64)
    sx, sy, sz = volume.spacing

    local_mean = ndimage.uniform_filter(hu, size=3, mode="nearest")
    local_sq_mean = ndimage.uniform_filter(hu * hu, size=3, mode="nearest")
    local_var = np.maximum(local_sq_mean - local_mean * local_mean, 0.0)
    local_std = np.sqrt(local_var)

    if min(hu.shape) >= 2:
        gx, gy, gz = np.gradient(hu, sx, sy, sz)
        grad_mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    else:
        grad_mag = np.zeros_like(hu)

    dist = _dist_to_boundary(hu, volume.spacing)

    return np.stack([hu, local_mean, local_std, grad_mag, dist], axis=-1)


def _dist_to_boundary(hu: np.ndarray, spacing) -> np.ndarray:
    nx, ny, nz = hu.shape
    sx, sy, sz = spacing

    ix = np.arange(nx, dtype=np.float64)
    iy = np.arange(ny, dtype=np.float64)
    iz = np.arange(nz, dtype=np.float64)
    dx = np.minimum(ix, nx - 1 - ix) * sx
    dy = np.minimum(iy, ny - 1 - iy) * sy
    dz = np.minimum(iz, nz - 1 - iz) * sz
    d_edge = np.minimum(
        np.minimum(dx[:, None, None], dy[None, :, None]), dz[None, None, :]
    )
    d_edge = np.broadcast_to(d_edge, hu.shape).copy()

    shell = hu > SHELL_HU_THRESHOLD
    if shell.any():
        d_shell = ndimage.distance_transform_edt(~shell, sampling=spacing)
        return np.minimum(d_edge, d_shell)
    return d_edge
