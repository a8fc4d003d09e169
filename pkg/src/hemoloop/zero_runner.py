"""Bundled reference external runner: echoes an all-zero probability grid.

Usage: python -m hemoloop.zero_runner --in <volume.raw> --out <probs.raw>
       [--sleep SECONDS] [--truncate N]

--sleep and --truncate exist to exercise the timeout and shape-check paths.
"""

import argparse
import sys
import time

import numpy as np

from . import rawio


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="zero_runner")
    parser.add_argument("--in", dest="in_path", required=True)
    parser.add_argument("--out", dest="out_path", required=True)
    parser.add_argument("--sleep", type=float, default=0.0)
    parser.add_argument("--truncate", type=int, default=0,
                        help="drop this many voxels from the output z extent")
    args = parser.parse_args(argv)

    if args.sleep:
        time.sleep(args.sleep)
    grid, spacing, origin = rawio.read_grid(args.in_path)
    nx, ny, nz = grid.shape
    out_nz = max(nz - args.truncate, 1) if args.truncate else nz
    probs = np.zeros((nx, ny, out_nz), dtype=np.float32)
    rawio.write_grid(args.out_path, probs, spacing, origin)
    return 0


if __name__ == "__main__":
    sys.exit(main())
