"""IMEX Runge-Kutta time stepping with the projection-preconditioned stage solver.

A Stepper owns all mesh-dependent setup (coupling blocks, condensed trace
systems, multigrid hierarchies) and advances a FlowState one step at a time.
Stage systems are solved by a defect-correction loop whose preconditioner is
the classical projection split: a tentative velocity solve followed by a
hybridised pressure correction.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dataclasses import dataclass
from typing import Optional

from . import forms
from .fespace import Field, make_space, interpolate, project_to_bdm, project_to_cg
from .forms import FormParams, build_mixed_blocks, assemble_mass
from .solver import (
    SolverError,
    condense,
    build_two_level_mg,
    solve_mixed,
    solve_tentative,
    tentative_preconditioner,
)


class TableauError(Exception):
    pass


@dataclass(frozen=True)
class ButcherTableau:
    """One additive implicit/explicit coefficient pair.

    Stage 0 is the known state: the first implicit column and b_im[0] are
    zero, so stages 1..s-1 each need one implicit solve.
    """

    name: str
    a_im: np.ndarray
    a_ex: np.ndarray
    b_im: np.ndarray
    b_ex: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        s = len(self.c)
        for mat, strict in ((self.a_im, False), (self.a_ex, True)):
            if mat.shape != (s, s):
                raise TableauError("tableau shape mismatch")
            k = -1 if strict else 0
            if np.any(np.abs(np.triu(mat, k + 1)) > 0):
                raise TableauError("tableau is not lower triangular")
        if np.any(self.a_im[:, 0] != 0.0) or self.b_im[0] != 0.0:
            raise TableauError("implicit tableau must have a zero first column")
        for b in (self.b_im, self.b_ex):
            if abs(b.sum() - 1.0) > 1e-14:
                raise TableauError("tableau weights do not sum to one")

    @property
    def s(self):
        return len(self.c)


def _pad(a, s):
    """Embed a printed (s-1)-stage tableau behind a leading zero stage."""
    out = np.zeros((s, s))
    out[1:, 1:] = a
    return out


_SSP3_ALPHA = 0.24169426078821
_SSP3_BETA = 0.06042356519705
_SSP3_ETA = 0.12915286960590
_SSP3_DELTA = 0.5 - _SSP3_ALPHA - _SSP3_BETA - _SSP3_ETA


def tableau(name):
    """Named schemes; the multi-stage pairs are padded with a zero stage so
    that stage 0 carries the previous timestep."""
    if name == "imex_euler":
        return ButcherTableau(
            name=name,
            a_im=np.array([[0.0, 0.0], [0.0, 1.0]]),
            a_ex=np.array([[0.0, 0.0], [1.0, 0.0]]),
            b_im=np.array([0.0, 1.0]),
            b_ex=np.array([1.0, 0.0]),
            c=np.array([0.0, 1.0]),
        )
    if name == "ssp2_332":
        third = 1.0 / 3.0
        a_im = np.array([[0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [third, third, third]])
        a_ex = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.5, 0.0]])
        b = np.array([0.0, third, third, third])
        return ButcherTableau(
            name=name,
            a_im=_pad(a_im, 4),
            a_ex=_pad(a_ex, 4),
            b_im=b,
            b_ex=b.copy(),
            c=np.array([0.0, 0.0, 1.0, 0.5]),
        )
    if name == "ssp3_433":
        al, be, et, de = _SSP3_ALPHA, _SSP3_BETA, _SSP3_ETA, _SSP3_DELTA
        a_im = np.array(
            [
                [al, 0.0, 0.0, 0.0],
                [-al, al, 0.0, 0.0],
                [0.0, 1.0 - al, al, 0.0],
                [be, et, de, al],
            ]
        )
        a_ex = np.array(
            [
                [0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.25, 0.25, 0.0],
            ]
        )
        b = np.array([0.0, 0.0, 1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0])
        return ButcherTableau(
            name=name,
            a_im=_pad(a_im, 5),
            a_ex=_pad(a_ex, 5),
            b_im=b,
            b_ex=b.copy(),
            c=np.array([0.0, 0.0, 0.0, 1.0, 0.5]),
        )
    raise TableauError(f"unknown tableau '{name}'")


# -- scalar surrogate -------------------------------------------------------------


def ode_imex_step(tab, y, t, dt, lam_im, g_ex):
    """One step for y' = lam_im*y + g_ex(t), same residual recursion as the
    PDE stepper (implicit part lam_im*y treated per stage, g_ex explicit)."""
    s = tab.s
    ys = np.zeros(s, dtype=float)
    rs = np.zeros(s, dtype=float)
    ys[0] = y
    for i in range(1, s):
        r = y
        for j in range(1, i):
            aij = tab.a_im[i, j]
            if aij != 0.0:
                if tab.a_im[j, j] == 0.0:
                    raise TableauError("residual recursion hits a zero diagonal")
                r += (aij / tab.a_im[j, j]) * (ys[j] - rs[j])
        for j in range(i):
            if tab.a_ex[i, j] != 0.0:
                r += dt * tab.a_ex[i, j] * g_ex(t + tab.c[j] * dt)
        rs[i] = r
        ys[i] = r / (1.0 - dt * tab.a_im[i, i] * lam_im)
    r = y
    for i in range(1, s):
        if tab.b_im[i] != 0.0:
            if tab.a_im[i, i] == 0.0:
                raise TableauError("final residual hits a zero diagonal")
            r += (tab.b_im[i] / tab.a_im[i, i]) * (ys[i] - rs[i])
    for i in range(s):
        if tab.b_ex[i] != 0.0:
            r += dt * tab.b_ex[i] * g_ex(t + tab.c[i] * dt)
    return r


def ode_integrate(tab, y0, t0, t_end, n_steps, lam_im, g_ex):
    dt = (t_end - t0) / n_steps
    y = y0
    for n in range(n_steps):
        y = ode_imex_step(tab, y, t0 + n * dt, dt, lam_im, g_ex)
    return y


# -- flow state -------------------------------------------------------------------


@dataclass
class FlowState:
    t: float
    Q: Field
    p: Field
    lam: Optional[Field] = None
    q: Optional[Field] = None


_TRACER_MASS_CACHE = {}


def _mass_solver(space):
    key = (space.mesh.uid, space.family, space.degree)
    if key not in _TRACER_MASS_CACHE:
        _TRACER_MASS_CACHE[key] = spla.factorized(assemble_mass(space).tocsc())
    return _TRACER_MASS_CACHE[key]


# -- pressure reconstruction ------------------------------------------------------


def reconstruct_pressure(
    Q, f, t, blocks=None, tau=1.0, cond=None, mg=None, rtol=1e-12,
    log=None, step=0,
):
    """Recover (p, lam) from the velocity by the hybridised elliptic solve.

    The scalar row receives the weak divergence of f_p = -f + (Q.grad)Q and
    the trace row the boundary flux of -f (the normal component of the
    advection term vanishes with n.Q on the boundary). Mean-zero p.
    """
    V_Q = Q.space
    mesh = V_Q.mesh
    if blocks is None:
        k = V_Q.degree - 1
        V_p = make_space(mesh, "dg_scalar", k)
        V_tr = make_space(mesh, "trace", k)
        blocks = build_mixed_blocks(V_Q, V_p, V_tr, tau)
    fp = forms.compute_fp(Q, f, t)
    r_p = forms.assemble_weak_divergence(blocks.V_p, fp)
    r_lam = forms.assemble_trace_boundary_source(blocks.V_tr, f, t)
    # remove the constant-mode defect: the continuous data is compatible, the
    # discrete rhs misses it by the boundary flux error of (Q.grad)Q
    shift = (r_p.sum() - r_lam.sum()) / len(r_lam)
    r_lam += shift
    r_Q = np.zeros(blocks.V_Q.total_dofs)
    U, p, lam, _ = solve_mixed(
        blocks, (r_Q, r_p, r_lam), 1.0, rtol=rtol, cond=cond, mg=mg,
        log=log, step=step, stage=-1, kind="reconstruct", check_rhs=False,
    )
    return p, lam


# -- IMEX stepper -----------------------------------------------------------------


class Stepper:
    """Advances the hybridised discretisation with an IMEX tableau.

    richardson_variant selects the stage solver's correction source:
      "split" (default) uses the weak-divergence source of the plain
        projection method, which removes the splitting error of the
        tentative velocity while leaving the per-stage projection filter
        intact;
      "constraint" feeds the full constraint defect to the mixed solve, so
        the loop converges to the monolithic stage solution. Useful as a
        reference; in long runs the exactly-enforced stage constraints let
        a weakly damped facet mode accumulate, which shows up as a plateau
        in the reconstructed-pressure error under refinement.
    """

    def __init__(
        self,
        V_Q,
        V_p,
        V_tr,
        tab,
        dt,
        params=None,
        forcing=None,
        n_richardson=2,
        richardson_variant="split",
        pressure_rtol=1e-12,
        velocity_rtol=1e-10,
        maxit=200,
        smooth_steps=2,
        log=None,
    ):
        if richardson_variant not in ("constraint", "split"):
            raise ValueError(f"unknown richardson variant '{richardson_variant}'")
        self.V_Q, self.V_p, self.V_tr = V_Q, V_p, V_tr
        self.tableau = tab
        self.dt = dt
        self.params = params if params is not None else FormParams()
        self.forcing = forcing
        self.n_richardson = n_richardson
        self.richardson_variant = richardson_variant
        self.pressure_rtol = pressure_rtol
        self.velocity_rtol = velocity_rtol
        self.maxit = maxit
        self.smooth_steps = smooth_steps
        self.log = log

        self.blocks = build_mixed_blocks(V_Q, V_p, V_tr, self.params.tau)
        self.M = self.blocks.M()
        self.G = sp.hstack([self.blocks.G_p(), self.blocks.G_lam()]).tocsr()
        self.B = sp.vstack([self.blocks.D(), self.blocks.B_muQ()]).tocsr()
        self.C = sp.bmat(
            [
                [self.blocks.C_pp(), self.blocks.C_plam()],
                [self.blocks.C_lamp(), self.blocks.C_lamlam()],
            ]
        ).tocsr()
        self._cond = {}
        self.last_final = None  # (Q^{n+1} coeffs, delta p, delta lam) of the last step

    def _condensed(self, gamma):
        if gamma not in self._cond:
            cs = condense(self.blocks, gamma)
            mg = build_two_level_mg(
                cs.S, self.V_tr, smooth_steps=self.smooth_steps, gamma=gamma
            )
            self._cond[gamma] = (cs, mg)
        return self._cond[gamma]

    def _forcing_vec(self, cj, tn, cache):
        if self.forcing is None:
            return None
        if cj not in cache:
            cache[cj] = forms.assemble_forcing(
                self.V_Q, self.forcing, tn + cj * self.dt, M=self.M
            )
        return cache[cj]

    def imex_residual(self, i, MQn, Q_stages, r_stages, tn, fcache):
        """r_i(w) without re-evaluating the implicit form: implicit stage
        contributions are recovered from (Q_j . w) - r_j(w)."""
        tab = self.tableau
        r = MQn.copy()
        for j in range(1, i):
            aij = tab.a_im[i, j]
            if aij != 0.0:
                if tab.a_im[j, j] == 0.0:
                    raise TableauError("residual recursion hits a zero diagonal")
                r += (aij / tab.a_im[j, j]) * (self.M @ Q_stages[j] - r_stages[j])
        for j in range(i):
            if tab.a_ex[i, j] != 0.0:
                fv = self._forcing_vec(tab.c[j], tn, fcache)
                if fv is not None:
                    r += self.dt * tab.a_ex[i, j] * fv
        return r

    def _final_residual(self, MQn, Q_stages, r_stages, tn, fcache):
        tab = self.tableau
        r = MQn.copy()
        for i in range(1, tab.s):
            if tab.b_im[i] != 0.0:
                if tab.a_im[i, i] == 0.0:
                    raise TableauError("final residual hits a zero diagonal")
                r += (tab.b_im[i] / tab.a_im[i, i]) * (
                    self.M @ Q_stages[i] - r_stages[i]
                )
        for i in range(tab.s):
            if tab.b_ex[i] != 0.0:
                fv = self._forcing_vec(tab.c[i], tn, fcache)
                if fv is not None:
                    r += self.dt * tab.b_ex[i] * fv
        return r

    def constraint_residual(self, Q_coeffs, p_coeffs, lam_coeffs):
        """Assembled Gamma rows applied to (Q, p, lam)."""
        y = np.concatenate([p_coeffs, lam_coeffs])
        return self.B @ Q_coeffs + self.C @ y

    def richardson_stage_solve(
        self, r, gamma, Qstar, Q0, y0, n_iter=None, step_index=0, stage=0
    ):
        """Defect-correction loop, preconditioned by the projection split:
        tentative velocity (Step I), hybridised correction (Step II),
        additive update (Step III). Returns (Q, y) coefficient vectors and
        the momentum defect norms per iteration."""
        if gamma == 0.0:
            raise SolverError("stage solve needs a nonzero implicit diagonal")
        if n_iter is None:
            n_iter = self.n_richardson
        F = forms.assemble_advection_operator(Qstar, self.params)
        A = (self.M - gamma * F).tocsr()
        prec = tentative_preconditioner(A)
        use_defect = self.richardson_variant == "constraint"
        cond, mg = self._condensed(gamma if use_defect else 1.0)
        Q = Q0.copy()
        y = y0.copy()
        n_p = self.V_p.total_dofs
        zQ = np.zeros(self.V_Q.total_dofs)
        defects = []
        for _ in range(n_iter):
            dr = r - A @ Q + gamma * (self.G @ y)
            defects.append(np.linalg.norm(dr))
            Qbar, _ = solve_tentative(
                A, dr, rtol=self.velocity_rtol, maxit=self.maxit, prec=prec,
                log=self.log, step=step_index, stage=stage,
            )
            if use_defect:
                rc = -(self.B @ (Q + Qbar) + self.C @ y)
                dQ, dp, dlam, _ = solve_mixed(
                    self.blocks, (zQ, rc[:n_p], rc[n_p:]), gamma,
                    rtol=self.pressure_rtol, maxit=self.maxit, cond=cond,
                    mg=mg, log=self.log, step=step_index, stage=stage,
                    kind="pressure", check_rhs=False,
                )
                Q = Q + Qbar + dQ.coefficients
            else:
                div = forms.assemble_weak_divergence(
                    self.V_p, Field(self.V_Q, Qbar)
                )
                dQ, dp, dlam, _ = solve_mixed(
                    self.blocks,
                    (zQ, -div / gamma, np.zeros(self.V_tr.total_dofs)),
                    1.0,
                    rtol=self.pressure_rtol, maxit=self.maxit, cond=cond,
                    mg=mg, log=self.log, step=step_index, stage=stage,
                    kind="pressure", check_rhs=False,
                )
                Q = Q + Qbar + gamma * dQ.coefficients
            y = y + np.concatenate([dp.coefficients, dlam.coefficients])
        self.last_defects = defects
        return Q, y

    def step(self, state, step_index=0):
        """One full IMEX step: stage loop, final update, pressure
        reconstruction, optional tracer transport."""
        tab = self.tableau
        dt = self.dt
        Qn = state.Q.coefficients
        MQn = self.M @ Qn
        fcache = {}
        Q_stages = [Qn]
        r_stages = [None]
        Qc = Qn.copy()
        y = np.concatenate([state.p.coefficients, state.lam.coefficients])
        for i in range(1, tab.s):
            r = self.imex_residual(i, MQn, Q_stages, r_stages, state.t, fcache)
            Qstar = project_to_bdm(Field(self.V_Q, Q_stages[i - 1]))
            gamma = dt * tab.a_im[i, i]
            Qc, y = self.richardson_stage_solve(
                r, gamma, Qstar, Qc, y, step_index=step_index, stage=i
            )
            Q_stages.append(Qc)
            r_stages.append(r)

        r = self._final_residual(MQn, Q_stages, r_stages, state.t, fcache)
        gamma_f = dt * tab.b_im[tab.s - 1]
        if gamma_f == 0.0:
            raise SolverError("final update needs a nonzero last implicit weight")
        cond, mg = self._condensed(gamma_f)
        Qf, dp, dlam, _ = solve_mixed(
            self.blocks,
            (r, np.zeros(self.V_p.total_dofs), np.zeros(self.V_tr.total_dofs)),
            gamma_f,
            rtol=self.pressure_rtol, maxit=self.maxit, cond=cond, mg=mg,
            log=self.log, step=step_index, stage=tab.s, kind="final",
        )
        self.last_final = (Qf.coefficients, dp.coefficients, dlam.coefficients)

        t1 = state.t + dt
        cond1, mg1 = self._condensed(1.0)
        p1, lam1 = reconstruct_pressure(
            Qf, self.forcing, t1, blocks=self.blocks, cond=cond1, mg=mg1,
            rtol=self.pressure_rtol, log=self.log, step=step_index,
        )
        q1 = None
        if state.q is not None:
            stage_fields = [Field(self.V_Q, c) for c in Q_stages]
            q1 = tracer_step(state.q, stage_fields, tab, dt)
        return FlowState(t=t1, Q=Qf, p=p1, lam=lam1, q=q1)


def initial_flow_state(V_Q, V_p, V_tr, Q0, f=None, t0=0.0, tau=1.0, q0=None,
                       tracer_degree=None):
    """Interpolate the initial velocity and reconstruct a matching pressure."""
    Q = interpolate(V_Q, Q0)
    blocks = build_mixed_blocks(V_Q, V_p, V_tr, tau)
    p, lam = reconstruct_pressure(Q, f, t0, blocks=blocks)
    q = None
    if q0 is not None:
        deg = tracer_degree if tracer_degree is not None else V_p.degree
        V_q = make_space(V_Q.mesh, "dg_scalar", deg)
        q = interpolate(V_q, q0)
    return FlowState(t=t0, Q=Q, p=p, lam=lam, q=q)


# -- reference non-hybridised step -------------------------------------------------


def implicit_dg_step(state, dt, params=None, forcing=None):
    """Backward-Euler step of the plain DG scheme for (Q, p); direct sparse
    factorisation of the bordered saddle system (the pressure constant mode
    is pinned by the border)."""
    V_Q = state.Q.space
    V_p = state.p.space
    params = params if params is not None else FormParams()
    Qstar = project_to_bdm(state.Q)
    F = forms.assemble_advection_operator(Qstar, params)
    M = forms.assemble_velocity_mass(V_Q)
    Gt = forms.assemble_dg_pressure_gradient(V_Q, V_p)
    nQ, npp = V_Q.total_dofs, V_p.total_dofs
    e = np.ones((npp, 1))
    K = sp.bmat(
        [
            [M - dt * F, -dt * Gt, None],
            [Gt.T, None, e],
            [None, e.T, None],
        ],
        format="csc",
    )
    rhs = np.zeros(nQ + npp + 1)
    rhs[:nQ] = M @ state.Q.coefficients
    if forcing is not None:
        rhs[:nQ] += dt * forms.assemble_forcing(V_Q, forcing, state.t, M=M)
    try:
        sol = spla.splu(K).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"implicit DG factorisation failed: {exc}") from exc
    from .fespace import mean

    Q1 = Field(V_Q, sol[:nQ])
    p1 = Field(V_p, sol[nQ:nQ + npp])
    p1.coefficients -= mean(p1) / (V_p.mesh.L ** 2)
    return FlowState(t=state.t + dt, Q=Q1, p=p1, lam=state.lam, q=state.q)


# -- passive tracer ----------------------------------------------------------------


def tracer_step(q, stage_velocities, tab, dt):
    """Explicit tableau update of the tracer; each advection evaluation uses
    the conforming projection of the matching stage velocity."""
    space = q.space
    solve = _mass_solver(space)
    adv = {}

    def advect(j, qj):
        if j not in adv:
            adv[j] = forms.assemble_tracer_advection(
                qj, project_to_cg(stage_velocities[j])
            )
        return adv[j]

    q_stages = [q]
    for i in range(1, tab.s):
        acc = None
        for j in range(i):
            aij = tab.a_ex[i, j]
            if aij != 0.0:
                term = aij * advect(j, q_stages[j])
                acc = term if acc is None else acc + term
        coeffs = q.coefficients.copy()
        if acc is not None:
            coeffs += dt * solve(acc)
        q_stages.append(Field(space, coeffs))
    acc = None
    for i in range(tab.s):
        bi = tab.b_ex[i]
        if bi != 0.0:
            term = bi * advect(i, q_stages[i])
            acc = term if acc is None else acc + term
    coeffs = q.coefficients.copy()
    if acc is not None:
        coeffs += dt * solve(acc)
    return Field(space, coeffs)
