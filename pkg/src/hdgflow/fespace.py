"""Finite element spaces and fields.

Families:
  dg_scalar / dg_vector : cellwise Lagrange polynomials, no continuity
  trace                 : facetwise Lagrange polynomials on the skeleton
  cg_scalar / cg_vector : continuous Lagrange
  bdm                   : cellwise vector polynomials used as the target
                          of the H(div) projection (same layout as dg_vector)

All bases are nodal; coefficients are point values at the element nodes.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import reference_triangle_quadrature, gauss_segment

_FAMILIES = ("dg_scalar", "dg_vector", "trace", "cg_scalar", "cg_vector", "bdm")


class SpaceError(Exception):
    pass


# -- reference elements ----------------------------------------------------


@lru_cache(maxsize=None)
def triangle_nodes(degree):
    """Equispaced lattice nodes on the reference triangle."""
    if degree == 0:
        return np.array([[1 / 3, 1 / 3]])
    pts = [
        (i / degree, j / degree)
        for j in range(degree + 1)
        for i in range(degree + 1 - j)
    ]
    return np.array(pts)


@lru_cache(maxsize=None)
def triangle_monomials(degree):
    return [(a, b) for b in range(degree + 1) for a in range(degree + 1 - b)]


@lru_cache(maxsize=None)
def _triangle_coeffs(degree):
    nodes = triangle_nodes(degree)
    monos = triangle_monomials(degree)
    V = np.array([[x**a * y**b for (a, b) in monos] for (x, y) in nodes])
    return np.linalg.inv(V)


def tabulate_triangle(degree, pts):
    """Values of the nodal basis at reference points, shape (npts, ndof)."""
    pts = np.atleast_2d(pts)
    monos = triangle_monomials(degree)
    V = np.stack([pts[:, 0] ** a * pts[:, 1] ** b for (a, b) in monos], axis=1)
    return V @ _triangle_coeffs(degree)


def tabulate_triangle_grad(degree, pts):
    """Reference gradients of the nodal basis, shape (npts, ndof, 2)."""
    pts = np.atleast_2d(pts)
    monos = triangle_monomials(degree)
    x, y = pts[:, 0], pts[:, 1]
    Gx = np.stack(
        [a * np.where(a > 0, x ** max(a - 1, 0), 0.0) * y**b for (a, b) in monos],
        axis=1,
    )
    Gy = np.stack(
        [b * x**a * np.where(b > 0, y ** max(b - 1, 0), 0.0) for (a, b) in monos],
        axis=1,
    )
    C = _triangle_coeffs(degree)
    return np.stack([Gx @ C, Gy @ C], axis=-1)


@lru_cache(maxsize=None)
def segment_nodes(degree):
    if degree == 0:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, degree + 1)


@lru_cache(maxsize=None)
def _segment_coeffs(degree):
    s = segment_nodes(degree)
    V = np.vander(s, degree + 1, increasing=True)
    return np.linalg.inv(V)


def tabulate_segment(degree, s):
    s = np.atleast_1d(np.asarray(s, dtype=float))
    V = np.vander(s, degree + 1, increasing=True)
    return V @ _segment_coeffs(degree)


# -- spaces ----------------------------------------------------------------


class Space:
    """A finite element space over a mesh: family, degree and DOF map."""

    def __init__(self, mesh, family, degree):
        if family not in _FAMILIES:
            raise SpaceError(f"unknown family {family!r}")
        if degree < 0:
            raise SpaceError("degree must be >= 0")
        if family in ("cg_scalar", "cg_vector", "bdm") and degree < 1:
            raise SpaceError(f"{family} requires degree >= 1")
        self.mesh = mesh
        self.family = family
        self.degree = int(degree)
        self.ncomp = 2 if family in ("dg_vector", "cg_vector", "bdm") else 1
        self._build_dofmap()

    # layout: for cell families the per-cell dof vector is
    # [comp0 at all nodes, comp1 at all nodes]; trace dofs are per facet.

    def _build_dofmap(self):
        mesh, k = self.mesh, self.degree
        if self.family in ("dg_scalar", "dg_vector", "bdm"):
            self.nodes_per_cell = len(triangle_nodes(k))
            self.ndof_cell = self.ncomp * self.nodes_per_cell
            self.total_dofs = mesh.num_cells * self.ndof_cell
            self._cell_dofs = (
                np.arange(mesh.num_cells)[:, None] * self.ndof_cell
                + np.arange(self.ndof_cell)[None, :]
            )
        elif self.family == "trace":
            self.ndof_facet = k + 1
            self.total_dofs = mesh.num_facets * self.ndof_facet
            self._facet_dofs = (
                np.arange(mesh.num_facets)[:, None] * self.ndof_facet
                + np.arange(self.ndof_facet)[None, :]
            )
        else:
            self._build_cg_dofmap()

    def _build_cg_dofmap(self):
        mesh, k = self.mesh, self.degree
        nodes = triangle_nodes(k)
        self.nodes_per_cell = len(nodes)
        nv = len(mesh.vertices)
        n_edge = k - 1
        n_int = (k - 1) * (k - 2) // 2 if k >= 2 else 0
        scalar_total = nv + mesh.num_facets * n_edge + mesh.num_cells * n_int

        cell_dofs_scalar = np.zeros((mesh.num_cells, self.nodes_per_cell), dtype=np.int64)
        for c in range(mesh.num_cells):
            interior_count = 0
            for ln, (x, y) in enumerate(nodes):
                i, j = round(x * k), round(y * k)
                lam = (k - i - j, i, j)
                if lam.count(k) == 1:
                    v_local = lam.index(k)
                    cell_dofs_scalar[c, ln] = mesh.cells[c][v_local]
                elif 0 in lam:
                    e = lam.index(0)
                    t = lam[(e + 2) % 3]  # lattice parameter along local edge
                    f = mesh.cell_facets[c, e]
                    fobj = mesh.facets[f]
                    forward = (fobj.cell_plus == c and fobj.edge_plus == e) or (
                        fobj.cell_minus == c
                        and fobj.edge_minus == e
                        and not fobj.flip_minus
                    )
                    slot = (t - 1) if forward else (k - 1 - t)
                    cell_dofs_scalar[c, ln] = nv + f * n_edge + slot
                else:
                    cell_dofs_scalar[c, ln] = (
                        nv + mesh.num_facets * n_edge + c * n_int + interior_count
                    )
                    interior_count += 1
        self.scalar_dofs = scalar_total
        self.total_dofs = self.ncomp * scalar_total
        if self.ncomp == 2:
            self._cell_dofs = np.concatenate(
                [cell_dofs_scalar, cell_dofs_scalar + scalar_total], axis=1
            )
            self.ndof_cell = 2 * self.nodes_per_cell
        else:
            self._cell_dofs = cell_dofs_scalar
            self.ndof_cell = self.nodes_per_cell

    def cell_dofs(self, c=None):
        if c is None:
            return self._cell_dofs
        return self._cell_dofs[c]

    def facet_dofs(self, f=None):
        if self.family != "trace":
            raise SpaceError("facet_dofs only defined for the trace family")
        if f is None:
            return self._facet_dofs
        return self._facet_dofs[f]

    # scalar basis tabulation (vector families use the component-block layout)
    def tabulate(self, pts):
        if self.family == "trace":
            return tabulate_segment(self.degree, pts)
        return tabulate_triangle(self.degree, pts)

    def tabulate_grad(self, pts):
        if self.family == "trace":
            raise SpaceError("no 2D gradient for trace spaces")
        return tabulate_triangle_grad(self.degree, pts)

    def node_coordinates(self):
        """Physical coordinates of the scalar nodes, per cell: (nc, nodes, 2)."""
        ref = triangle_nodes(self.degree)
        return (
            self.mesh.cell_origin[:, None, :]
            + np.einsum("cij,nj->cni", self.mesh.jac, ref)
        )


def make_space(mesh, family, degree):
    return Space(mesh, family, degree)


@dataclass
class Field:
    space: Space
    coefficients: np.ndarray

    def copy(self):
        return Field(self.space, self.coefficients.copy())

    def cell_coefficients(self):
        """(nc, ndof_cell) view of the coefficients by cell."""
        return self.coefficients[self.space.cell_dofs()]

    def eval_cells(self, ref_pts):
        """Evaluate on every cell at shared reference points.

        Returns (nc, npts) for scalar spaces, (nc, npts, 2) for vector ones.
        """
        sp_ = self.space
        tab = sp_.tabulate(ref_pts)  # (npts, ns)
        coef = self.cell_coefficients()
        ns = sp_.nodes_per_cell
        if sp_.ncomp == 1:
            return np.einsum("qn,cn->cq", tab, coef)
        cx = np.einsum("qn,cn->cq", tab, coef[:, :ns])
        cy = np.einsum("qn,cn->cq", tab, coef[:, ns:])
        return np.stack([cx, cy], axis=-1)

    def eval_grad_cells(self, ref_pts):
        """Physical gradients at shared reference points.

        Scalar: (nc, npts, 2); vector: (nc, npts, 2, 2) with [..., comp, deriv].
        """
        sp_ = self.space
        g = sp_.tabulate_grad(ref_pts)  # (npts, ns, 2)
        # physical gradient: invJ^T applied to reference gradient, per cell
        gphys = np.einsum("qnd,cde->cqne", g, sp_.mesh.invJ)
        coef = self.cell_coefficients()
        ns = sp_.nodes_per_cell
        if sp_.ncomp == 1:
            return np.einsum("cqne,cn->cqe", gphys, coef)
        gx = np.einsum("cqne,cn->cqe", gphys, coef[:, :ns])
        gy = np.einsum("cqne,cn->cqe", gphys, coef[:, ns:])
        return np.stack([gx, gy], axis=-2)

    def eval_facets(self, s_params, side="plus"):
        """Evaluate the cellwise polynomial on all facets at parameters s.

        Returns (nfacets, npts) or (nfacets, npts, 2). Boundary facets only
        have a plus side; their minus values are returned as the plus trace.
        """
        mesh = self.space.mesh
        tab_p, tab_m = _facet_side_tabulations(self.space, tuple(np.atleast_1d(s_params)))
        coef = self.cell_coefficients()
        cells_p = np.array([f.cell_plus for f in mesh.facets])
        cells_m = np.array(
            [f.cell_minus if f.interior else f.cell_plus for f in mesh.facets]
        )
        ns = self.space.nodes_per_cell
        tab = tab_p if side == "plus" else tab_m
        cc = coef[cells_p] if side == "plus" else coef[cells_m]
        if self.space.ncomp == 1:
            return np.einsum("fqn,fn->fq", tab, cc)
        vx = np.einsum("fqn,fn->fq", tab, cc[:, :ns])
        vy = np.einsum("fqn,fn->fq", tab, cc[:, ns:])
        return np.stack([vx, vy], axis=-1)


def _facet_ref_points(mesh, s):
    """Reference coordinates of facet points in the plus and minus cells."""
    s = np.asarray(s)
    nf, nq = mesh.num_facets, len(s)
    xp = np.zeros((nf, nq, 2))
    xm = np.zeros((nf, nq, 2))
    for f in mesh.facets:
        pts = f.coords[0] + np.outer(s, f.coords[1] - f.coords[0])
        xp[f.index] = mesh.to_reference(f.cell_plus, pts)
        if f.interior:
            xm[f.index] = mesh.to_reference(f.cell_minus, pts + f.offset_minus)
        else:
            xm[f.index] = xp[f.index]
    return xp, xm


_FACET_TAB_CACHE = {}


def _facet_side_tabulations(space, s_tuple):
    key = (space.mesh.uid, space.family, space.degree, s_tuple)
    if key in _FACET_TAB_CACHE:
        return _FACET_TAB_CACHE[key]
    xp, xm = _facet_ref_points(space.mesh, np.array(s_tuple))
    nf, nq, _ = xp.shape
    tp = space.tabulate(xp.reshape(-1, 2)).reshape(nf, nq, -1)
    tm = space.tabulate(xm.reshape(-1, 2)).reshape(nf, nq, -1)
    _FACET_TAB_CACHE[key] = (tp, tm)
    return tp, tm


# -- interpolation, projection, norms ---------------------------------------


def _eval_fn(fn, x, y, t=None):
    if t is None:
        return fn(x, y)
    return fn(x, y, t)


def interpolate(space, fn, t=None):
    """Nodal interpolant of an analytic function (x, y [, t]) -> value(s)."""
    if space.family == "trace":
        s = segment_nodes(space.degree)
        coeffs = np.zeros(space.total_dofs)
        for f in space.mesh.facets:
            pts = space.mesh.facet_points(f, s)
            coeffs[space.facet_dofs(f.index)] = [
                _eval_fn(fn, p[0], p[1], t) for p in pts
            ]
        return Field(space, coeffs)

    xy = space.node_coordinates()  # (nc, nodes, 2)
    vals = _eval_fn(fn, xy[..., 0], xy[..., 1], t)
    coeffs = np.zeros(space.total_dofs)
    dofs = space.cell_dofs()
    ns = space.nodes_per_cell
    if space.ncomp == 1:
        coeffs[dofs] = np.broadcast_to(vals, xy.shape[:2])
    else:
        vx, vy = vals
        coeffs[dofs[:, :ns]] = np.broadcast_to(vx, xy.shape[:2])
        coeffs[dofs[:, ns:]] = np.broadcast_to(vy, xy.shape[:2])
    return Field(space, coeffs)


def quadrature_degree(space):
    return 2 * space.degree + 2


def l2_norm(field):
    return l2_error(field, None)


def l2_error(field, exact=None, t=None):
    """L2 norm of (field - exact); exact=None gives the plain L2 norm."""
    space = field.space
    deg = max(quadrature_degree(space), 2)
    xi, w = reference_triangle_quadrature(deg)
    vals = field.eval_cells(xi)
    if exact is not None:
        xy = (
            space.mesh.cell_origin[:, None, :]
            + np.einsum("cij,qj->cqi", space.mesh.jac, xi)
        )
        ex = _eval_fn(exact, xy[..., 0], xy[..., 1], t)
        if space.ncomp == 2:
            ex = np.stack(
                [np.broadcast_to(ex[0], vals.shape[:2]),
                 np.broadcast_to(ex[1], vals.shape[:2])], axis=-1
            )
        else:
            ex = np.broadcast_to(ex, vals.shape)
        vals = vals - ex
    if space.ncomp == 2:
        sq = (vals**2).sum(axis=-1)
    else:
        sq = vals**2
    total = np.einsum("cq,q,c->", sq, w, space.mesh.detJ)
    return float(np.sqrt(max(total, 0.0)))


def mean(field):
    """Integral of the field over the domain (scalar spaces)."""
    space = field.space
    if space.ncomp != 1:
        raise SpaceError("mean is defined for scalar fields")
    xi, w = reference_triangle_quadrature(max(space.degree, 1) + 1)
    vals = field.eval_cells(xi)
    return float(np.einsum("cq,q,c->", vals, w, space.mesh.detJ))


# -- H(div) projection -------------------------------------------------------

_BDM_CACHE = {}


def project_to_bdm(Q):
    """Project a dg_vector field onto an H(div)-conforming representative.

    The normal trace on each interior facet is fixed by moments of the
    averaged normal trace against P_{degree}(F); boundary facets get zero
    normal trace (no-flux). Remaining cell dofs are an L2 best fit.
    """
    space = Q.space
    if space.family not in ("dg_vector", "bdm"):
        raise SpaceError("project_to_bdm expects a dg_vector field")
    mesh = space.mesh
    deg = space.degree
    key = (mesh.uid, deg)
    if key not in _BDM_CACHE:
        _BDM_CACHE[key] = _bdm_setup(mesh, space)
    setup = _BDM_CACHE[key]

    # facet moments of avg(Q) . n+ against Legendre polynomials on [0,1]
    s, wq = gauss_segment(2 * deg + 2)
    qp = Q.eval_facets(s, side="plus")
    qm = Q.eval_facets(s, side="minus")
    normals = np.array([f.normal for f in mesh.facets])
    lengths = np.array([f.length for f in mesh.facets])
    avg_qn = 0.5 * np.einsum("fqd,fd->fq", qp + qm, normals)
    if len(mesh.boundary_facets):
        avg_qn[mesh.boundary_facets] = 0.0
    # legendre values at s: (nq, nmom)
    P = setup["legendre"]
    moments = np.einsum("fq,q,qm->fm", avg_qn, wq, P) * lengths[:, None]

    nc = mesh.num_cells
    nmom = P.shape[1]
    ncon = 3 * nmom
    bcon = np.zeros((nc, ncon))
    for e in range(3):
        fids = mesh.cell_facets[:, e]
        sgn = setup["edge_sign"][:, e]
        flip = setup["edge_flip"][:, e]
        mom = moments[fids] * sgn[:, None]
        # orientation: odd Legendre moments change sign under s -> 1-s
        mom = np.where(flip[:, None], mom * setup["parity"][None, :], mom)
        bcon[:, e * nmom : (e + 1) * nmom] = mom

    # KKT solve: [[Mloc, A^T], [A, 0]] (x, mult) = (Mloc q, bcon)
    rhs = np.concatenate(
        [np.einsum("cij,cj->ci", setup["Mloc"], Q.cell_coefficients()), bcon], axis=1
    )
    sol = np.linalg.solve(setup["KKT"], rhs[..., None])[..., 0]
    out = np.zeros(space.total_dofs)
    out[space.cell_dofs()] = sol[:, : space.ndof_cell]
    return Field(space, out)


def _bdm_setup(mesh, space):
    deg = space.degree
    ns = space.nodes_per_cell
    nd = space.ndof_cell
    nmom = deg + 1
    s, wq = gauss_segment(2 * deg + 2)
    # Legendre on [0,1]
    P = np.polynomial.legendre.legvander(2 * s - 1, deg)
    parity = np.array([(-1.0) ** m for m in range(nmom)])

    xi, w = reference_triangle_quadrature(2 * deg + 2)
    B = tabulate_triangle(deg, xi)
    Mref = np.einsum("qi,qj,q->ij", B, B, w)
    Mloc = np.zeros((mesh.num_cells, nd, nd))
    for comp in range(2):
        sl = slice(comp * ns, (comp + 1) * ns)
        Mloc[:, sl, sl] = Mref[None] * mesh.detJ[:, None, None]

    # constraint matrices: rows for each (edge, moment), columns = cell dofs
    A = np.zeros((mesh.num_cells, 3 * nmom, nd))
    edge_sign = np.zeros((mesh.num_cells, 3))
    edge_flip = np.zeros((mesh.num_cells, 3), dtype=bool)
    tab_p, tab_m = _facet_side_tabulations(space, tuple(s))
    normals = np.array([f.normal for f in mesh.facets])
    lengths = np.array([f.length for f in mesh.facets])
    for c in range(mesh.num_cells):
        for e in range(3):
            fid = mesh.cell_facets[c, e]
            f = mesh.facets[fid]
            is_plus = f.cell_plus == c and f.edge_plus == e
            sgn = 1.0 if is_plus else -1.0  # outward normal of this cell
            flip = (not is_plus) and f.flip_minus
            edge_sign[c, e] = sgn
            edge_flip[c, e] = flip
            tab = tab_p[fid] if is_plus else tab_m[fid]  # (nq, ns)
            n = normals[fid] * sgn
            Pe = P * parity[None, :] if flip else P
            for comp in range(2):
                blk = np.einsum("qn,qm,q->mn", tab, Pe, wq) * lengths[fid] * n[comp]
                A[c, e * nmom : (e + 1) * nmom, comp * ns : (comp + 1) * ns] = blk
            # moments recorded in facet orientation must match: we build rows in
            # the cell's own traversal; bcon applies the same parity flip.

    ncon = 3 * nmom
    KKT = np.zeros((mesh.num_cells, nd + ncon, nd + ncon))
    KKT[:, :nd, :nd] = Mloc
    KKT[:, :nd, nd:] = np.transpose(A, (0, 2, 1))
    KKT[:, nd:, :nd] = A
    return {
        "Mloc": Mloc,
        "KKT": KKT,
        "legendre": P,
        "parity": parity,
        "edge_sign": edge_sign,
        "edge_flip": edge_flip,
    }


# -- projection to continuous spaces ----------------------------------------

_CG_SOLVER_CACHE = {}


def _cg_mass_solver(space):
    key = (space.mesh.uid, space.family, space.degree)
    if key in _CG_SOLVER_CACHE:
        return _CG_SOLVER_CACHE[key]
    mesh = space.mesh
    deg = 2 * space.degree + 2
    xi, w = reference_triangle_quadrature(deg)
    B = space.tabulate(xi)
    Mref = np.einsum("qi,qj,q->ij", B, B, w)
    nsc = space.scalar_dofs
    dofs = space.cell_dofs()[:, : space.nodes_per_cell]
    vals = Mref[None] * mesh.detJ[:, None, None]
    rows = np.repeat(dofs, space.nodes_per_cell, axis=1).ravel()
    cols = np.tile(dofs, (1, space.nodes_per_cell)).ravel()
    M = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(nsc, nsc))
    solver = spla.factorized(M.tocsc())
    _CG_SOLVER_CACHE[key] = (solver, B, w)
    return _CG_SOLVER_CACHE[key]


def project_to_cg(Q, degree=None):
    """Global L2 projection of a DG field onto the continuous space."""
    mesh = Q.space.mesh
    degree = Q.space.degree if degree is None else degree
    family = "cg_vector" if Q.space.ncomp == 2 else "cg_scalar"
    target = make_space(mesh, family, degree)
    solver, B, w = _cg_mass_solver(target)
    xi, _ = reference_triangle_quadrature(2 * target.degree + 2)
    vals = Q.eval_cells(xi)  # evaluated at the same points as B
    dofs = target.cell_dofs()[:, : target.nodes_per_cell]
    coeffs = np.zeros(target.total_dofs)
    nsc = target.scalar_dofs
    for comp in range(target.ncomp):
        v = vals[..., comp] if target.ncomp == 2 else vals
        cellrhs = np.einsum("cq,qn,q,c->cn", v, B, w, mesh.detJ)
        rhs = np.zeros(nsc)
        np.add.at(rhs, dofs, cellrhs)
        coeffs[comp * nsc : (comp + 1) * nsc] = solver(rhs)
    return Field(target, coeffs)
