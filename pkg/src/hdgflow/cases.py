"""Benchmark problems, derived diagnostics, and the convergence-study driver.

Two flows are built in: a decaying vortex on the unit square with no-flux
walls and a known exact solution, and a perturbed double shear layer on a
fully periodic box. The study driver reruns the vortex over a grid/degree
matrix and writes convergence.csv.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .mesh import build_square_mesh, reference_triangle_quadrature
from .fespace import Field, make_space, interpolate, l2_error, l2_norm
from . import forms
from . import timeloop


# -- decaying vortex ------------------------------------------------------------


@dataclass
class TaylorGreenCase:
    """Decaying vortex with forcing on [0,1]^2; n.Q0 = 0 on the walls."""

    kappa: float = 0.5
    L: float = 1.0
    periodic: bool = False

    def Q0(self, x, y):
        X = (2 * x - 1) * np.pi / 2
        Y = (2 * y - 1) * np.pi / 2
        return (-np.cos(X) * np.sin(Y), np.sin(X) * np.cos(Y))

    def forcing(self, x, y, t):
        qx, qy = self.Q0(x, y)
        s = -self.kappa * np.exp(-self.kappa * t)
        return (s * qx, s * qy)

    def exact_Q(self, x, y, t):
        qx, qy = self.Q0(x, y)
        s = np.exp(-self.kappa * t)
        return (s * qx, s * qy)

    def exact_p(self, x, y, t):
        # mean-zero pressure balancing (Q.grad)Q for the decaying vortex
        X = (2 * x - 1) * np.pi
        Y = (2 * y - 1) * np.pi
        return -np.exp(-2 * self.kappa * t) * (np.cos(X) + np.cos(Y)) / 4


def taylor_green(kappa=0.5):
    return TaylorGreenCase(kappa=kappa)


# -- double shear layer -----------------------------------------------------------


@dataclass
class ShearFlowCase:
    """Two perturbed shear layers on the periodic box [0, 2*pi]^2."""

    rho: float = np.pi / 15.0
    delta: float = 0.05
    L: float = 2 * np.pi
    periodic: bool = True

    def Q0(self, x, y):
        lower = np.tanh((y - np.pi / 2) / self.rho)
        upper = np.tanh((3 * np.pi / 2 - y) / self.rho)
        qx = np.where(y <= np.pi, lower, upper)
        return (qx, self.delta * np.sin(x))


def shear_flow(rho=np.pi / 15.0, delta=0.05):
    return ShearFlowCase(rho=rho, delta=delta)


# -- diagnostics -------------------------------------------------------------------


def energy(Q):
    """Kinetic energy 0.5 * ||Q||^2."""
    return 0.5 * l2_norm(Q) ** 2


def vorticity(Q, degree=None):
    """Cellwise curl of a DG vector field, L2-projected to a DG scalar space."""
    if degree is None:
        degree = Q.space.degree - 1
    Vw = make_space(Q.space.mesh, "dg_scalar", degree)
    xi, w = reference_triangle_quadrature(Q.space.degree + degree + 2)
    grad = Q.eval_grad_cells(xi)  # (nc, nq, comp, deriv)
    omega = grad[:, :, 1, 0] - grad[:, :, 0, 1]
    B = Vw.tabulate(xi)
    rhs = np.einsum("qi,q,cq,c->ci", B, w, omega, Q.space.mesh.detJ)
    Mloc = forms.mass_cell_blocks(Vw)
    out = np.zeros(Vw.total_dofs)
    out[Vw.cell_dofs()] = np.linalg.solve(Mloc, rhs[:, :, None])[:, :, 0]
    return Field(Vw, out)


def divergence_norm(Q, p, lam, blocks=None, tau=1.0):
    """Norm of the assembled constraint residual (cell and trace rows)."""
    if blocks is None:
        mesh = Q.space.mesh
        k = Q.space.degree - 1
        blocks = forms.build_mixed_blocks(
            Q.space, make_space(mesh, "dg_scalar", k),
            make_space(mesh, "trace", k), tau,
        )
    r_p = blocks.D() @ Q.coefficients + blocks.C_pp() @ p.coefficients
    r_lam = blocks.B_muQ() @ Q.coefficients + blocks.C_lamp() @ p.coefficients
    if lam is not None:
        r_p = r_p + blocks.C_plam() @ lam.coefficients
        r_lam = r_lam + blocks.C_lamlam() @ lam.coefficients
    return float(np.sqrt(r_p @ r_p + r_lam @ r_lam))


# -- convergence study ---------------------------------------------------------------


@dataclass
class ConvergenceRow:
    k: int
    n: int
    h: float
    dt: float
    err_Q_L2: float
    err_p_L2: float
    order_Q: float = float("nan")
    order_p: float = float("nan")


def _run_vortex(case, n, k, tab_name, T, n_richardson=2, log=None):
    mesh = build_square_mesh(n, case.L)
    V_Q = make_space(mesh, "dg_vector", k + 1)
    V_p = make_space(mesh, "dg_scalar", k)
    V_tr = make_space(mesh, "trace", k)
    dt = T / n
    stepper = timeloop.Stepper(
        V_Q, V_p, V_tr, timeloop.tableau(tab_name), dt,
        forcing=case.forcing, n_richardson=n_richardson, log=log,
    )
    state = timeloop.initial_flow_state(V_Q, V_p, V_tr, case.Q0, f=case.forcing)
    for i in range(n):
        state = stepper.step(state, i)
    errQ = l2_error(state.Q, case.exact_Q, t=state.t)
    errp = l2_error(state.p, case.exact_p, t=state.t)
    return state, errQ, errp


# Projection sweeps per stage solve used in error sweeps. Higher degrees
# need the stage splitting residual pushed below a smaller discretisation
# error, and at dt = h the two-sweep loop is weakly unstable for degree 3.
RICHARDSON_BY_DEGREE = {1: 2, 2: 3, 3: 6}


def run_convergence_study(
    degrees, grids, tableaus, kappa=0.5, T=1.0, path=None, n_richardson=None,
):
    """Vortex error sweep; grids is {k: [n, ...]}, tableaus is {k: name}.

    n_richardson is an int applied everywhere, or None for the per-degree
    defaults in RICHARDSON_BY_DEGREE. Returns the rows and optionally
    writes them as convergence.csv (columns k, n, h, dt, err_Q_L2,
    err_p_L2, order_Q, order_p; orders are per refinement pair, nan on the
    coarsest grid).
    """
    case = taylor_green(kappa)
    rows = []
    for k in degrees:
        prev = None
        nr = n_richardson if n_richardson is not None \
            else RICHARDSON_BY_DEGREE.get(k, 2)
        for n in grids[k]:
            _, errQ, errp = _run_vortex(
                case, n, k, tableaus[k], T, n_richardson=nr
            )
            row = ConvergenceRow(
                k=k, n=n, h=case.L / n, dt=T / n, err_Q_L2=errQ, err_p_L2=errp
            )
            if prev is not None:
                row.order_Q = np.log2(prev.err_Q_L2 / errQ)
                row.order_p = np.log2(prev.err_p_L2 / errp)
            rows.append(row)
            prev = row
    if path is not None:
        write_convergence_csv(rows, path)
    return rows


def write_convergence_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "n", "h", "dt", "err_Q_L2", "err_p_L2", "order_Q", "order_p"])
        for r in rows:
            w.writerow(
                [r.k, r.n, "%.12e" % r.h, "%.12e" % r.dt,
                 "%.12e" % r.err_Q_L2, "%.12e" % r.err_p_L2,
                 "%.6f" % r.order_Q, "%.6f" % r.order_p]
            )
