"""Minimal reader for the ASCII VTK unstructured-grid snapshots.

Only the subset the solver writes is supported: POINTS, CELLS of linear
triangles, POINT_DATA with VECTORS and SCALARS blocks.
"""

import numpy as np


class VtkError(Exception):
    pass


def read_vtu(path):
    """Return {points (npts, 2), cells (nc, 3), <field>: array}."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    out = {}
    npts = 0
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0]
        if key == "POINTS":
            npts = int(parts[1])
            block = [lines[i + 1 + j].split() for j in range(npts)]
            out["points"] = np.array(block, dtype=float)[:, :2]
            i += npts + 1
        elif key == "CELLS":
            nc = int(parts[1])
            block = [lines[i + 1 + j].split() for j in range(nc)]
            cells = np.array(block, dtype=int)
            if np.any(cells[:, 0] != 3):
                raise VtkError(f"{path}: non-triangle cell encountered")
            out["cells"] = cells[:, 1:]
            i += nc + 1
        elif key == "VECTORS":
            block = [lines[i + 1 + j].split() for j in range(npts)]
            out[parts[1]] = np.array(block, dtype=float)[:, :2]
            i += npts + 1
        elif key == "SCALARS":
            block = lines[i + 2:i + 2 + npts]
            out[parts[1]] = np.array(block, dtype=float)
            i += npts + 2
        else:
            i += 1
    if "points" not in out or "cells" not in out:
        raise VtkError(f"{path}: not an unstructured-grid snapshot")
    return out
