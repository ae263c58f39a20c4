import os

import numpy as np
import pytest

from hdgflow.mesh import build_square_mesh, gauss_segment
from hdgflow.fespace import Field, make_space, interpolate, l2_error, mean
from hdgflow import cases


def test_vortex_point_values():
    c = cases.taylor_green()
    qx, qy = c.Q0(0.5, 0.0)
    assert abs(qx - 1.0) < 1e-15 and abs(qy) < 1e-15
    # mean-zero pressure, extremal at the centre
    assert abs(c.exact_p(0.5, 0.5, 0.0) - (-0.5)) < 1e-15
    assert abs(c.exact_p(0.0, 0.5, 0.0)) < 1e-15


def test_vortex_pressure_mean_zero():
    c = cases.taylor_green(kappa=0.3)
    xi, w = np.polynomial.legendre.leggauss(20)
    x = 0.5 * (xi + 1.0)
    wx = 0.5 * w
    X, Y = np.meshgrid(x, x)
    W = np.outer(wx, wx)
    for t in (0.0, 0.7):
        assert abs(np.sum(W * c.exact_p(X, Y, t))) < 1e-12


def test_vortex_momentum_balance():
    # grad p + (Q.grad)Q - f = -dQ/dt must hold for the exact fields
    c = cases.taylor_green(kappa=0.5)
    x, y, t, eps = 0.3, 0.7, 0.2, 1e-6

    def p(x, y):
        return c.exact_p(x, y, t)

    px = (p(x + eps, y) - p(x - eps, y)) / (2 * eps)
    py = (p(x, y + eps) - p(x, y - eps)) / (2 * eps)
    Q = np.array(c.exact_Q(x, y, t))
    dQx = (np.array(c.exact_Q(x + eps, y, t)) - c.exact_Q(x - eps, y, t)) / (2 * eps)
    dQy = (np.array(c.exact_Q(x, y + eps, t)) - c.exact_Q(x, y - eps, t)) / (2 * eps)
    adv = Q[0] * dQx + Q[1] * dQy
    dQt = (np.array(c.exact_Q(x, y, t + eps)) - c.exact_Q(x, y, t - eps)) / (2 * eps)
    f = np.array(c.forcing(x, y, t))
    res = dQt + adv + np.array([px, py]) - f
    assert np.linalg.norm(res) < 1e-8


def test_vortex_no_flux_boundary():
    c = cases.taylor_green()
    mesh = build_square_mesh(4, 1.0)
    s, _ = gauss_segment(4)
    worst = 0.0
    for f in mesh.facets:
        if f.interior:
            continue
        pts = mesh.facet_points(f, s)
        qx, qy = c.Q0(pts[:, 0], pts[:, 1])
        worst = max(worst, np.max(np.abs(qx * f.normal[0] + qy * f.normal[1])))
    assert worst <= 1e-14


def test_shear_flow_values_and_continuity():
    c = cases.shear_flow()
    qx, qy = c.Q0(0.0, np.pi / 2)
    assert abs(qx) < 1e-15 and abs(qy) < 1e-15
    qx, qy = c.Q0(np.pi / 2, np.pi / 2)
    assert abs(qx) < 1e-15 and abs(qy - 0.05) < 1e-15
    qx, _ = c.Q0(0.0, np.pi)
    assert abs(qx - np.tanh(7.5)) < 1e-12
    below = c.Q0(1.0, np.pi - 1e-300)[0]
    above = c.Q0(1.0, np.nextafter(np.pi, 4.0))[0]
    assert abs(below - above) <= 1e-14


def test_vorticity_rigid_rotation_and_constant():
    mesh = build_square_mesh(4, 1.0)
    V_Q = make_space(mesh, "dg_vector", 2)
    rot = interpolate(V_Q, lambda x, y: (-y, x))
    w = cases.vorticity(rot)
    assert l2_error(w, lambda x, y: np.full_like(x, 2.0)) < 1e-12
    const = interpolate(V_Q, lambda x, y: (np.ones_like(x), np.ones_like(y)))
    assert np.allclose(cases.vorticity(const).coefficients, 0.0, atol=1e-12)


def test_vorticity_vortex_curl():
    c = cases.taylor_green()

    def exact_curl(x, y):
        X = (2 * x - 1) * np.pi / 2
        Y = (2 * y - 1) * np.pi / 2
        return 2 * np.pi * np.cos(X) * np.cos(Y)

    errs = []
    for n in (8, 16):
        mesh = build_square_mesh(n, 1.0)
        Q = interpolate(make_space(mesh, "dg_vector", 2), c.Q0)
        errs.append(l2_error(cases.vorticity(Q), exact_curl))
    assert np.log2(errs[0] / errs[1]) >= 1.7


def test_divergence_norm_cases():
    mesh = build_square_mesh(4, 1.0)
    V_Q = make_space(mesh, "dg_vector", 2)
    V_p = make_space(mesh, "dg_scalar", 1)
    zero_p = Field(V_p, np.zeros(V_p.total_dofs))
    # uniform flow is solenoidal with continuous normal trace
    Q = interpolate(V_Q, lambda x, y: (np.ones_like(x), np.zeros_like(y)))
    d0 = cases.divergence_norm(Q, zero_p, None)
    # the no-flux trace rows see the unit inflow/outflow walls
    assert d0 > 0.1
    rot = interpolate(V_Q, lambda x, y: (0.5 - y, x - 0.5))
    Qdiv = interpolate(V_Q, lambda x, y: (x, np.zeros_like(y)))
    assert cases.divergence_norm(Qdiv, zero_p, None) > 0.1
    pm = build_square_mesh(4, 1.0, periodic=True)
    Qp = interpolate(make_space(pm, "dg_vector", 2),
                     lambda x, y: (np.ones_like(x), np.zeros_like(y)))
    Vpp = make_space(pm, "dg_scalar", 1)
    pp = Field(Vpp, np.zeros(Vpp.total_dofs))
    assert cases.divergence_norm(Qp, pp, None) <= 1e-12


def test_energy():
    mesh = build_square_mesh(4, 1.0)
    V_Q = make_space(mesh, "dg_vector", 2)
    Q = interpolate(V_Q, lambda x, y: (2 * np.ones_like(x), np.zeros_like(y)))
    assert abs(cases.energy(Q) - 2.0) < 1e-12


def test_convergence_study_and_csv(tmp_path):
    path = os.path.join(tmp_path, "convergence.csv")
    rows = cases.run_convergence_study(
        [1], {1: [4, 8]}, {1: "imex_euler"}, T=0.25, path=path
    )
    assert len(rows) == 2
    assert np.isnan(rows[0].order_Q)
    assert rows[1].err_Q_L2 < rows[0].err_Q_L2
    assert rows[1].order_Q > 0.5
    with open(path) as fh:
        lines = fh.read().strip().split("\n")
    assert lines[0] == "k,n,h,dt,err_Q_L2,err_p_L2,order_Q,order_p"
    assert len(lines) == 3


def test_convergence_study_deterministic():
    a = cases.run_convergence_study([1], {1: [4]}, {1: "imex_euler"}, T=0.25)
    b = cases.run_convergence_study([1], {1: [4]}, {1: "imex_euler"}, T=0.25)
    assert a[0].err_Q_L2 == b[0].err_Q_L2
    assert a[0].err_p_L2 == b[0].err_p_L2
