"""Assembly of the discrete operators.

Volume and facet integrals are batched with numpy over all cells/facets.
Blocks that take part in the cell-local elimination are kept both as global
sparse matrices and as dense per-cell arrays (see MixedBlocks).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import reference_triangle_quadrature, gauss_segment
from .fespace import (
    Field,
    interpolate,
    triangle_nodes,
    _facet_side_tabulations,
    tabulate_segment,
)


@dataclass
class FormParams:
    alpha: float = 1.0  # normal-jump penalty
    tau: float = 1.0  # pressure stabilisation
    delta_up: float = 1.0  # 1 = upwind flux, 0 = central
    dt: float = 0.0
    a_ii: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.tau <= 0:
            raise ValueError("alpha and tau must be positive")


# -- shared geometry helpers -------------------------------------------------

_GEOM_CACHE = {}


class _FacetData:
    """Per-mesh facet arrays used by every facet loop."""

    def __init__(self, mesh):
        self.normals = np.array([f.normal for f in mesh.facets])
        self.lengths = np.array([f.length for f in mesh.facets])
        self.cells_p = np.array([f.cell_plus for f in mesh.facets])
        self.cells_m = np.array(
            [f.cell_minus if f.interior else f.cell_plus for f in mesh.facets]
        )
        self.edges_p = np.array([f.edge_plus for f in mesh.facets])
        self.edges_m = np.array(
            [f.edge_minus if f.interior else f.edge_plus for f in mesh.facets]
        )
        self.interior = mesh.interior_facets
        self.boundary = mesh.boundary_facets


def _facet_data(mesh):
    key = mesh.uid
    if key not in _GEOM_CACHE:
        _GEOM_CACHE[key] = _FacetData(mesh)
    return _GEOM_CACHE[key]


def _phys_grads(space, xi):
    """Physical basis gradients at shared reference points: (nc, nq, ns, 2)."""
    g = space.tabulate_grad(xi)
    return np.einsum("qnd,cde->cqne", g, space.mesh.invJ)


class _COO:
    # triplet buffer cap before folding into CSR; keeps assembly of the
    # largest operators (degree-4 vector fields on n=64) under ~1 GB
    _max_pending = 16_000_000

    def __init__(self, shape):
        self.shape = shape
        self.data, self.rows, self.cols = [], [], []
        self.pending = 0
        self.acc = None

    def add(self, blocks, rows, cols):
        """blocks (m, nr, nc), rows (m, nr), cols (m, nc)."""
        if blocks.size == 0:
            return
        m, nr, nc = blocks.shape
        self.data.append(blocks.ravel())
        self.rows.append(
            np.broadcast_to(rows[:, :, None], (m, nr, nc)).astype(np.int32).ravel()
        )
        self.cols.append(
            np.broadcast_to(cols[:, None, :], (m, nr, nc)).astype(np.int32).ravel()
        )
        self.pending += blocks.size
        if self.pending > self._max_pending:
            self._collapse()

    def _collapse(self):
        part = sp.csr_matrix(
            (
                np.concatenate(self.data),
                (np.concatenate(self.rows), np.concatenate(self.cols)),
            ),
            shape=self.shape,
        )
        self.acc = part if self.acc is None else self.acc + part
        self.data, self.rows, self.cols = [], [], []
        self.pending = 0

    def tocsr(self):
        if self.data:
            self._collapse()
        return sp.csr_matrix(self.shape) if self.acc is None else self.acc


def _vector_dofs_by_side(space, cells):
    """Cell dof arrays per component for the given cell list: (m, 2, ns)."""
    ns = space.nodes_per_cell
    d = space.cell_dofs()[cells]
    return d[:, :ns], d[:, ns:]


# -- mass matrices ------------------------------------------------------------


def assemble_mass(space):
    """Mass matrix of a DG space (scalar or vector), cell-block diagonal."""
    mesh = space.mesh
    xi, w = reference_triangle_quadrature(2 * space.degree + 2)
    B = space.tabulate(xi)
    Mref = np.einsum("qi,qj,q->ij", B, B, w)
    blocks = Mref[None] * mesh.detJ[:, None, None]
    ns = space.nodes_per_cell
    coo = _COO((space.total_dofs, space.total_dofs))
    dofs = space.cell_dofs()
    for comp in range(space.ncomp):
        d = dofs[:, comp * ns : (comp + 1) * ns]
        coo.add(blocks, d, d)
    return coo.tocsr()


def assemble_velocity_mass(V_Q):
    return assemble_mass(V_Q)


def mass_cell_blocks(space):
    """Per-cell dense mass blocks (nc, ndof_cell, ndof_cell)."""
    mesh = space.mesh
    xi, w = reference_triangle_quadrature(2 * space.degree + 2)
    B = space.tabulate(xi)
    Mref = np.einsum("qi,qj,q->ij", B, B, w)
    ns, nd = space.nodes_per_cell, space.ndof_cell
    out = np.zeros((mesh.num_cells, nd, nd))
    for comp in range(space.ncomp):
        slc = slice(comp * ns, (comp + 1) * ns)
        out[:, slc, slc] = Mref[None] * mesh.detJ[:, None, None]
    return out


# -- advection ----------------------------------------------------------------


def assemble_advection_operator(Qstar, params):
    """Matrix F with <w, F Q> = f_im(w, Q, Q*).

    Four groups: volume advection -(w.(Q*.grad)Q); interior-facet
    consistency <(Q*.n+)(Q+ - Q-).avg(w)>; the alpha/h_F penalty on normal
    jumps; and the upwind term -delta_up <|Q*.n+|(Q+ - Q-).(w+ - w-)>.
    """
    space = Qstar.space
    mesh = space.mesh
    ns = space.nodes_per_cell
    nd = space.total_dofs
    alpha, dup = params.alpha, params.delta_up
    coo = _COO((nd, nd))

    # volume advection
    kQ = space.degree
    xi, w = reference_triangle_quadrature(3 * kQ + 1)
    B = space.tabulate(xi)
    gphys = _phys_grads(space, xi)
    qv = Qstar.eval_cells(xi)  # (nc, nq, 2)
    adv = np.einsum("cqd,cqjd->cqj", qv, gphys)
    vol = -np.einsum("qi,cqj,q,c->cij", B, adv, w, mesh.detJ)
    dofs_x, dofs_y = _vector_dofs_by_side(space, np.arange(mesh.num_cells))
    coo.add(vol, dofs_x, dofs_x)
    coo.add(vol, dofs_y, dofs_y)

    # facet terms
    fd = _facet_data(mesh)
    s, wq = gauss_segment(3 * kQ + 2)
    tab_p, tab_m = _facet_side_tabulations(space, tuple(s))
    un = np.einsum("fqd,fd->fq", Qstar.eval_facets(s, "plus"), fd.normals)
    wl = wq[None, :] * fd.lengths[:, None]

    I = fd.interior
    if len(I):
        tabs = {"p": tab_p[I], "m": tab_m[I]}
        dofs = {
            "p": _vector_dofs_by_side(space, fd.cells_p[I]),
            "m": _vector_dofs_by_side(space, fd.cells_m[I]),
        }
        sig = {"p": 1.0, "m": -1.0}
        unI, wlI = un[I], wl[I]
        absI = np.abs(unI)
        for a in ("p", "m"):
            for b in ("p", "m"):
                # component-diagonal kernel: consistency + upwind
                ker = 0.5 * sig[b] * unI - dup * sig[a] * sig[b] * absI
                blk = np.einsum("fq,q,fqi,fqj->fij", ker, wq, tabs[a], tabs[b])
                blk *= fd.lengths[I, None, None]
                for comp in range(2):
                    coo.add(blk, dofs[a][comp], dofs[b][comp])
                # penalty couples components through n (x) n
                pen = np.einsum("fq,fqi,fqj->fij", wlI, tabs[a], tabs[b])
                pen *= (-alpha * sig[a] * sig[b] / fd.lengths[I])[:, None, None]
                for c in range(2):
                    for d in range(2):
                        nn = fd.normals[I, c] * fd.normals[I, d]
                        coo.add(pen * nn[:, None, None], dofs[a][c], dofs[b][d])

    Bd = fd.boundary
    if len(Bd):
        tb = tab_p[Bd]
        dx, dy = _vector_dofs_by_side(space, fd.cells_p[Bd])
        dofs_b = (dx, dy)
        pen = np.einsum("fq,fqi,fqj->fij", wl[Bd], tb, tb)
        pen *= (-alpha / fd.lengths[Bd])[:, None, None]
        for c in range(2):
            for d in range(2):
                nn = fd.normals[Bd, c] * fd.normals[Bd, d]
                coo.add(pen * nn[:, None, None], dofs_b[c], dofs_b[d])

    return coo.tocsr()


def assemble_forcing(V_Q, f, t, M=None):
    """Vector b with <w, b> = (w . f(t)); f interpolated then mass-applied."""
    if M is None:
        M = assemble_mass(V_Q)
    return M @ interpolate(V_Q, f, t).coefficients


# -- pressure gradient and constraint -----------------------------------------


def assemble_pressure_gradient(V_Q, V_p, V_tr):
    """(G_p, G_lam) with <w, G_p p + G_lam lam> = g(w, p, lam)."""
    blocks = build_mixed_blocks(V_Q, V_p, V_tr, tau=1.0)
    return blocks.G_p(), blocks.G_lam()


def assemble_constraint(V_Q, V_p, V_tr, tau):
    """(D, C_pp, C_plam, C_lamp, C_lamlam, B_muQ) realising the Gamma rows."""
    b = build_mixed_blocks(V_Q, V_p, V_tr, tau=tau)
    return b.D(), b.C_pp(), b.C_plam(), b.C_lamp(), b.C_lamlam(), b.B_muQ()


@dataclass
class MixedBlocks:
    """All coupling blocks of the mixed saddle system, stored per cell.

    Per-cell dense arrays use the layout [Q dofs | p dofs] against the
    3*(k+1) trace dofs of the cell's facets (edge-major). Global sparse
    matrices are materialised on demand.
    """

    V_Q: object
    V_p: object
    V_tr: object
    tau: float
    M_cell: np.ndarray  # (nc, ndQ, ndQ)
    Gp_cell: np.ndarray  # (nc, ndQ, ndp)
    D_cell: np.ndarray  # (nc, ndp, ndQ)
    Cpp_cell: np.ndarray  # (nc, ndp, ndp)
    Glam_cell: np.ndarray  # (nc, ndQ, 3*ntr)
    Cplam_cell: np.ndarray  # (nc, ndp, 3*ntr)
    BmuQ_cell: np.ndarray  # (nc, 3*ntr, ndQ)
    Clamp_cell: np.ndarray  # (nc, 3*ntr, ndp)
    Clamlam_facet: np.ndarray  # (nf, ntr, ntr)
    cell_trace_dofs: np.ndarray  # (nc, 3*ntr)

    def _cellmat(self, arr, rows, cols, shape):
        coo = _COO(shape)
        coo.add(arr, rows, cols)
        return coo.tocsr()

    def M(self):
        d = self.V_Q.cell_dofs()
        n = self.V_Q.total_dofs
        return self._cellmat(self.M_cell, d, d, (n, n))

    def G_p(self):
        return self._cellmat(
            self.Gp_cell,
            self.V_Q.cell_dofs(),
            self.V_p.cell_dofs(),
            (self.V_Q.total_dofs, self.V_p.total_dofs),
        )

    def D(self):
        return self._cellmat(
            self.D_cell,
            self.V_p.cell_dofs(),
            self.V_Q.cell_dofs(),
            (self.V_p.total_dofs, self.V_Q.total_dofs),
        )

    def C_pp(self):
        d = self.V_p.cell_dofs()
        n = self.V_p.total_dofs
        return self._cellmat(self.Cpp_cell, d, d, (n, n))

    def G_lam(self):
        return self._cellmat(
            self.Glam_cell,
            self.V_Q.cell_dofs(),
            self.cell_trace_dofs,
            (self.V_Q.total_dofs, self.V_tr.total_dofs),
        )

    def C_plam(self):
        return self._cellmat(
            self.Cplam_cell,
            self.V_p.cell_dofs(),
            self.cell_trace_dofs,
            (self.V_p.total_dofs, self.V_tr.total_dofs),
        )

    def B_muQ(self):
        return self._cellmat(
            self.BmuQ_cell,
            self.cell_trace_dofs,
            self.V_Q.cell_dofs(),
            (self.V_tr.total_dofs, self.V_Q.total_dofs),
        )

    def C_lamp(self):
        return self._cellmat(
            self.Clamp_cell,
            self.cell_trace_dofs,
            self.V_p.cell_dofs(),
            (self.V_tr.total_dofs, self.V_p.total_dofs),
        )

    def C_lamlam(self):
        fd = self.V_tr.facet_dofs()
        n = self.V_tr.total_dofs
        return self._cellmat(self.Clamlam_facet, fd, fd, (n, n))


_BLOCK_CACHE = {}


def build_mixed_blocks(V_Q, V_p, V_tr, tau):
    key = (V_Q.mesh.uid, V_Q.degree, V_p.degree, V_tr.degree, tau)
    if key in _BLOCK_CACHE:
        return _BLOCK_CACHE[key]
    mesh = V_Q.mesh
    fd = _facet_data(mesh)
    nc = mesh.num_cells
    nsQ, ndQ = V_Q.nodes_per_cell, V_Q.ndof_cell
    ndp = V_p.ndof_cell
    ntr = V_tr.ndof_facet

    # volume blocks
    deg = V_Q.degree + V_p.degree + 1
    xi, w = reference_triangle_quadrature(deg)
    Bp = V_p.tabulate(xi)
    gQ = _phys_grads(V_Q, xi)
    M_cell = mass_cell_blocks(V_Q)
    Gp_cell = np.zeros((nc, ndQ, ndp))
    D_cell = np.zeros((nc, ndp, ndQ))
    for comp in range(2):
        blk = np.einsum("cqie,qj,q,c->cij", gQ[..., comp : comp + 1], Bp, w, mesh.detJ)
        blk = blk.reshape(nc, nsQ, ndp)
        Gp_cell[:, comp * nsQ : (comp + 1) * nsQ, :] = blk
        D_cell[:, :, comp * nsQ : (comp + 1) * nsQ] = np.transpose(blk, (0, 2, 1))

    # facet blocks
    s, wq = gauss_segment(2 * V_Q.degree + 2)
    tQ = _facet_side_tabulations(V_Q, tuple(s))
    tp = _facet_side_tabulations(V_p, tuple(s))
    T = tabulate_segment(V_tr.degree, s)  # (nq, ntr), same for all facets
    wl = wq[None, :] * fd.lengths[:, None]

    Cpp_cell = np.zeros((nc, ndp, ndp))
    Glam4 = np.zeros((nc, 3, ndQ, ntr))
    Cplam4 = np.zeros((nc, 3, ndp, ntr))
    BmuQ4 = np.zeros((nc, 3, ntr, ndQ))
    Clamp4 = np.zeros((nc, 3, ntr, ndp))
    Clamlam = np.zeros((mesh.num_facets, ntr, ntr))

    TT = np.einsum("qm,qn->qmn", T, T)
    for side, facets in (("p", fd.interior), ("m", fd.interior), ("p", fd.boundary)):
        if len(facets) == 0:
            continue
        boundary = facets is fd.boundary
        sgn = 1.0 if side == "p" else -1.0
        cells = (fd.cells_p if side == "p" else fd.cells_m)[facets]
        edges = (fd.edges_p if side == "p" else fd.edges_m)[facets]
        tQs = (tQ[0] if side == "p" else tQ[1])[facets]
        tps = (tp[0] if side == "p" else tp[1])[facets]
        wls = wl[facets]
        nrm = fd.normals[facets]

        # same-side pressure stabilisation tau <psi psi>
        np.add.at(
            Cpp_cell, cells, tau * np.einsum("fq,fqi,fqj->fij", wls, tps, tps)
        )
        # -tau <psi lam>
        cpl = -tau * np.einsum("fq,fqi,qm->fim", wls, tps, T)
        Cplam4[cells, edges] += cpl
        # tau <mu p>
        Clamp4[cells, edges] += -np.transpose(cpl, (0, 2, 1))
        # trace rows of the transmission condition: sgn <mu (Q.n)>
        for comp in range(2):
            bq = sgn * np.einsum(
                "fq,qm,fqj,f->fmj", wls, T, tQs, nrm[:, comp]
            )
            BmuQ4[cells, edges, :, comp * nsQ : (comp + 1) * nsQ] += bq
            # momentum coupling: -sgn <(w.n) lam>
            Glam4[cells, edges, comp * nsQ : (comp + 1) * nsQ, :] += -np.transpose(
                bq, (0, 2, 1)
            )
        # -tau <lam mu> per facet (twice from the two interior sides)
        np.add.at(
            Clamlam, facets, -tau * np.einsum("fq,qmn->fmn", wls, TT)
        )

    blocks = MixedBlocks(
        V_Q=V_Q,
        V_p=V_p,
        V_tr=V_tr,
        tau=tau,
        M_cell=M_cell,
        Gp_cell=Gp_cell,
        D_cell=D_cell,
        Cpp_cell=Cpp_cell,
        Glam_cell=Glam4.transpose(0, 2, 1, 3).reshape(nc, ndQ, 3 * ntr),
        Cplam_cell=Cplam4.transpose(0, 2, 1, 3).reshape(nc, ndp, 3 * ntr),
        BmuQ_cell=BmuQ4.reshape(nc, 3 * ntr, ndQ),
        Clamp_cell=Clamp4.reshape(nc, 3 * ntr, ndp),
        Clamlam_facet=Clamlam,
        cell_trace_dofs=V_tr.facet_dofs()[mesh.cell_facets].reshape(nc, 3 * ntr),
    )
    _BLOCK_CACHE[key] = blocks
    return blocks


# -- weak divergence -----------------------------------------------------------


def assemble_trace_boundary_source(V_tr, f, t):
    """Vector with <mu, .> = -sum over boundary facets of <mu (n . f(t))>."""
    from .fespace import _eval_fn

    mesh = V_tr.mesh
    out = np.zeros(V_tr.total_dofs)
    fd = _facet_data(mesh)
    if f is None or len(fd.boundary) == 0:
        return out
    s, wq = gauss_segment(2 * V_tr.degree + 2)
    T = tabulate_segment(V_tr.degree, s)
    fdofs = V_tr.facet_dofs()
    for fi in fd.boundary:
        fac = mesh.facets[fi]
        pts = mesh.facet_points(fac, s)
        fx, fy = _eval_fn(f, pts[:, 0], pts[:, 1], t)
        fn = fac.normal[0] * np.broadcast_to(fx, s.shape) \
            + fac.normal[1] * np.broadcast_to(fy, s.shape)
        out[fdofs[fi]] -= fac.length * np.einsum("q,q,qi->i", wq, fn, T)
    return out


def assemble_weak_divergence(V_p, Z):
    """Vector d with <psi, d> = Div(psi, Z).

    Volume (psi div Z), minus the facet correction, whose interior part per
    facet equals -1/2 <jump(psi) jump(Z).n+>, minus <psi Z.n> on the boundary.
    """
    mesh = V_p.mesh
    fd = _facet_data(mesh)
    deg = V_p.degree + Z.space.degree + 1
    xi, w = reference_triangle_quadrature(deg)
    Bp = V_p.tabulate(xi)
    gZ = Z.eval_grad_cells(xi)  # (nc, nq, 2, 2)
    divZ = gZ[..., 0, 0] + gZ[..., 1, 1]
    out = np.zeros(V_p.total_dofs)
    cell = np.einsum("cq,qi,q,c->ci", divZ, Bp, w, mesh.detJ)
    np.add.at(out, V_p.cell_dofs(), cell)

    s, wq = gauss_segment(deg + 2)
    tp = _facet_side_tabulations(V_p, tuple(s))
    wl = wq[None, :] * fd.lengths[:, None]
    zp = Z.eval_facets(s, "plus")
    zm = Z.eval_facets(s, "minus")

    I = fd.interior
    if len(I):
        jump_zn = np.einsum("fqd,fd->fq", zp[I] - zm[I], fd.normals[I])
        for side, tab, cells, sgn in (
            ("p", tp[0][I], fd.cells_p[I], 1.0),
            ("m", tp[1][I], fd.cells_m[I], -1.0),
        ):
            vec = -0.5 * sgn * np.einsum("fq,fq,fqi->fi", wl[I], jump_zn, tab)
            np.add.at(out, V_p.cell_dofs()[cells], vec)
    Bd = fd.boundary
    if len(Bd):
        zn = np.einsum("fqd,fd->fq", zp[Bd], fd.normals[Bd])
        vec = -np.einsum("fq,fq,fqi->fi", wl[Bd], zn, tp[0][Bd])
        np.add.at(out, V_p.cell_dofs()[fd.cells_p[Bd]], vec)
    return out


# -- non-hybridised DG pressure gradient ----------------------------------------


def assemble_dg_pressure_gradient(V_Q, V_p):
    """Matrix realising (p div w) - <jump(w.n) avg(p)> - <(w.n) p>_bdy."""
    mesh = V_Q.mesh
    fd = _facet_data(mesh)
    nsQ = V_Q.nodes_per_cell
    coo = _COO((V_Q.total_dofs, V_p.total_dofs))

    xi, w = reference_triangle_quadrature(V_Q.degree + V_p.degree + 1)
    Bp = V_p.tabulate(xi)
    gQ = _phys_grads(V_Q, xi)
    dp = V_p.cell_dofs()
    for comp in range(2):
        blk = np.einsum("cqi,qj,q,c->cij", gQ[..., comp], Bp, w, mesh.detJ)
        coo.add(blk, V_Q.cell_dofs()[:, comp * nsQ : (comp + 1) * nsQ], dp)

    s, wq = gauss_segment(V_Q.degree + V_p.degree + 2)
    tQ = _facet_side_tabulations(V_Q, tuple(s))
    tp = _facet_side_tabulations(V_p, tuple(s))
    wl = wq[None, :] * fd.lengths[:, None]

    I = fd.interior
    if len(I):
        for a, ta, ca, sa in (("p", tQ[0][I], fd.cells_p[I], 1.0),
                              ("m", tQ[1][I], fd.cells_m[I], -1.0)):
            for b, tb, cb in (("p", tp[0][I], fd.cells_p[I]),
                              ("m", tp[1][I], fd.cells_m[I])):
                for comp in range(2):
                    blk = -0.5 * sa * np.einsum(
                        "fq,fqi,fqj,f->fij", wl[I], ta, tb, fd.normals[I, comp]
                    )
                    coo.add(
                        blk,
                        V_Q.cell_dofs()[ca][:, comp * nsQ : (comp + 1) * nsQ],
                        dp[cb],
                    )
    Bd = fd.boundary
    if len(Bd):
        for comp in range(2):
            blk = -np.einsum(
                "fq,fqi,fqj,f->fij", wl[Bd], tQ[0][Bd], tp[0][Bd], fd.normals[Bd, comp]
            )
            coo.add(
                blk,
                V_Q.cell_dofs()[fd.cells_p[Bd]][:, comp * nsQ : (comp + 1) * nsQ],
                dp[fd.cells_p[Bd]],
            )
    return coo.tocsr()


# -- nonlinear source for the pressure reconstruction ----------------------------


def compute_fp(Q, f, t):
    """Field f_p = -f + (Q.grad)Q, evaluated at the velocity nodes."""
    space = Q.space
    nodes = triangle_nodes(space.degree)
    ns = space.nodes_per_cell
    qv = Q.eval_cells(nodes)  # (nc, ns, 2)
    gq = Q.eval_grad_cells(nodes)  # (nc, ns, 2, 2)
    conv = np.einsum("cnd,cned->cne", qv, gq)
    xy = space.node_coordinates()
    if f is not None:
        fx, fy = f(xy[..., 0], xy[..., 1], t)
        fval = np.stack(
            [np.broadcast_to(fx, xy.shape[:2]), np.broadcast_to(fy, xy.shape[:2])],
            axis=-1,
        )
    else:
        fval = 0.0
    vals = -fval + conv
    out = np.zeros(space.total_dofs)
    dofs = space.cell_dofs()
    out[dofs[:, :ns]] = vals[..., 0]
    out[dofs[:, ns:]] = vals[..., 1]
    return Field(space, out)


# -- passive tracer ---------------------------------------------------------------


def assemble_tracer_advection(q, Q_cg):
    """Vector with <chi, .> = (q div(chi Q)) - <q_up jump(chi Q.n)>_int."""
    space = q.space
    mesh = space.mesh
    fd = _facet_data(mesh)
    deg = 2 * space.degree + Q_cg.space.degree + 1
    xi, w = reference_triangle_quadrature(deg)
    B = space.tabulate(xi)
    gchi = _phys_grads(space, xi)
    qv = q.eval_cells(xi)
    Qv = Q_cg.eval_cells(xi)
    gQ = Q_cg.eval_grad_cells(xi)
    divQ = gQ[..., 0, 0] + gQ[..., 1, 1]
    out = np.zeros(space.total_dofs)
    cell = np.einsum("cq,cqid,cqd,q,c->ci", qv, gchi, Qv, w, mesh.detJ)
    cell += np.einsum("cq,qi,cq,q,c->ci", qv, B, divQ, w, mesh.detJ)
    np.add.at(out, space.cell_dofs(), cell)

    I = fd.interior
    if len(I):
        s, wq = gauss_segment(deg + 2)
        tq = _facet_side_tabulations(space, tuple(s))
        un = np.einsum(
            "fqd,fd->fq", Q_cg.eval_facets(s, "plus")[I], fd.normals[I]
        )
        qp = q.eval_facets(s, "plus")[I]
        qm = q.eval_facets(s, "minus")[I]
        qup = np.where(un >= 0.0, qp, qm)
        wl = wq[None, :] * fd.lengths[I, None]
        for tab, cells, sgn in (
            (tq[0][I], fd.cells_p[I], 1.0),
            (tq[1][I], fd.cells_m[I], -1.0),
        ):
            vec = -sgn * np.einsum("fq,fq,fq,fqi->fi", wl, qup, un, tab)
            np.add.at(out, space.cell_dofs()[cells], vec)
    return out
