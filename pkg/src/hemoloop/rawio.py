"""Raw grid file format shared by volume storage and the external-runner seam.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic b"RAWVOL01"
    8       1     dtype code: 0 = float32, 1 = uint8
    9       3     zero padding
    12      4     u32 nx
    16      4     u32 ny
    20      4     u32 nz
    24      8     f64 sx (mm)
    32      8     f64 sy
    40      8     f64 sz
    48      8     f64 origin x (mm)
    56      8     f64 origin y
    64      8     f64 origin z
    72      -     payload: nx*ny*nz values, x varies fastest, then y, then z

External model runners read and write exactly this format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RAWVOL01"
HEADER_SIZE = 72
_DTYPES = {0: np.float32, 1: np.uint8}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


def write_grid(
    path: str | Path,
    grid: np.ndarray,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> None:
    grid = np.asarray(grid)
    code = _CODES.get(grid.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {grid.dtype}; use float32 or uint8")
    if grid.ndim != 3:
        raise ValueError("grid must be 3-dimensional")
    nx, ny, nz = grid.shape
    header = (
        MAGIC
        + struct.pack("<B3x", code)
        + struct.pack("<III", nx, ny, nz)
        + struct.pack("<ddd", *spacing)
        + struct.pack("<ddd", *origin)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.ravel(order="F").tobytes())


def read_grid(path: str | Path):
    """Returns (grid, spacing, origin); grid shape is (nx, ny, nz)."""
    with open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE or header[:8] != MAGIC:
            raise ValueError(f"{path}: not a RAWVOL01 file")
        code = header[8]
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        nx, ny, nz = struct.unpack_from("<III", header, 12)
        spacing = struct.unpack_from("<ddd", header, 24)
        origin = struct.unpack_from("<ddd", header, 48)
        payload = f.read()
    dtype = _DTYPES[code]
    count = nx * ny * nz
    values = np.frombuffer(payload, dtype=dtype)
    if values.size != count:
        raise ValueError(f"{path}: payload holds {values.size} values, header says {count}")
    grid = values.reshape((nx, ny, nz), order="F").copy()
    return grid, spacing, origin
