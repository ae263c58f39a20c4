"""ASCII VTK unstructured-grid snapshots of a flow state.

Each triangle carries its own three corner points, so discontinuous fields
and periodic meshes are represented without smearing or wrap-around cells.
Point data: velocity, pressure, vorticity, and (when an exact solution is
supplied) err_velocity / err_pressure magnitudes.
"""

import numpy as np

from .fespace import _eval_fn
from .cases import vorticity


_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def write_vtu(state, mesh, path, exact_Q=None, exact_p=None):
    """Write one snapshot; fields evaluated at the cell corners."""
    pts = mesh.cell_coords  # (nc, 3, 2), unwrapped for periodic meshes
    nc = len(mesh.cells)
    vel = state.Q.eval_cells(_CORNERS)  # (nc, 3, 2)
    pres = state.p.eval_cells(_CORNERS)  # (nc, 3)
    vort = vorticity(state.Q).eval_cells(_CORNERS)

    scalars = [("pressure", pres), ("vorticity", vort)]
    if exact_Q is not None:
        ex = np.stack(
            _eval_fn(exact_Q, pts[:, :, 0], pts[:, :, 1], state.t), axis=-1
        )
        scalars.append(("err_velocity", np.linalg.norm(vel - ex, axis=-1)))
    if exact_p is not None:
        exp_ = _eval_fn(exact_p, pts[:, :, 0], pts[:, :, 1], state.t)
        scalars.append(("err_pressure", np.abs(pres - exp_)))

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"flow snapshot t={state.t!r}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {3 * nc} double\n")
        for c in range(nc):
            for a in range(3):
                fh.write("%.12e %.12e 0.0\n" % (pts[c, a, 0], pts[c, a, 1]))
        fh.write(f"CELLS {nc} {4 * nc}\n")
        for c in range(nc):
            fh.write("3 %d %d %d\n" % (3 * c, 3 * c + 1, 3 * c + 2))
        fh.write(f"CELL_TYPES {nc}\n")
        fh.write("5\n" * nc)
        fh.write(f"POINT_DATA {3 * nc}\n")
        fh.write("VECTORS velocity double\n")
        for c in range(nc):
            for a in range(3):
                fh.write("%.12e %.12e 0.0\n" % (vel[c, a, 0], vel[c, a, 1]))
        for name, data in scalars:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for c in range(nc):
                for a in range(3):
                    fh.write("%.12e\n" % data[c, a])


def read_vtu(path):
    """Parse a snapshot back into {points, cells, <field name>: array}."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    out = {}
    i = 0
    npts = ncells = 0
    while i < len(tokens):
        line = tokens[i].split()
        if not line:
            i += 1
            continue
        key = line[0]
        if key == "POINTS":
            npts = int(line[1])
            data = [tokens[i + 1 + j].split() for j in range(npts)]
            out["points"] = np.array(data, dtype=float)[:, :2]
            i += npts + 1
        elif key == "CELLS":
            ncells = int(line[1])
            data = [tokens[i + 1 + j].split()[1:] for j in range(ncells)]
            out["cells"] = np.array(data, dtype=int)
            i += ncells + 1
        elif key == "VECTORS":
            data = [tokens[i + 1 + j].split() for j in range(npts)]
            out[line[1]] = np.array(data, dtype=float)[:, :2]
            i += npts + 1
        elif key == "SCALARS":
            data = [tokens[i + 2 + j] for j in range(npts)]
            out[line[1]] = np.array(data, dtype=float)
            i += npts + 2
        else:
            i += 1
    return out
