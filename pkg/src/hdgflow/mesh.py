"""Structured triangular meshes on the square [0, L]^2.

The domain is divided into n x n squares, each split along the
lower-left -> upper-right diagonal into two right-angled triangles.
Facet connectivity, outward normals and (optionally) periodic
identification of opposite edges are built at construction time.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi


class MeshError(Exception):
    """Invalid mesh parameters or topology."""


@dataclass
class Facet:
    index: int
    vertices: tuple
    coords: np.ndarray          # (2, 2) endpoints A, B in the K+ frame
    normal: np.ndarray          # unit normal pointing out of K+
    length: float
    cell_plus: int
    edge_plus: int              # local edge index within K+
    cell_minus: int = None
    edge_minus: int = None
    flip_minus: bool = False    # K- traverses its edge opposite to A->B
    offset_minus: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def interior(self):
        return self.cell_minus is not None


class Mesh:
    """Immutable triangulation of [0, L]^2 with 2*n^2 cells."""

    _counter = itertools.count()

    def __init__(self, n, L, periodic=False):
        if n < 1:
            raise MeshError(f"grid size must be >= 1, got {n}")
        if L <= 0:
            raise MeshError(f"domain length must be positive, got {L}")
        self.n = int(n)
        self.L = float(L)
        self.periodic = bool(periodic)
        # unique key for downstream tabulation caches (object ids get reused)
        self.uid = next(Mesh._counter)
        self._build()

    # -- construction ---------------------------------------------------

    def _vid(self, i, j):
        n = self.n
        if self.periodic:
            return (i % n) + (j % n) * n
        return i + j * (n + 1)

    def _build(self):
        n, L = self.n, self.L
        hx = L / n

        if self.periodic:
            ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        else:
            ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        self.vertices = np.column_stack([ii.T.ravel() * hx, jj.T.ravel() * hx])

        cells = []
        cell_coords = []
        for j in range(n):
            for i in range(n):
                a = (i * hx, j * hx)
                b = ((i + 1) * hx, j * hx)
                c = ((i + 1) * hx, (j + 1) * hx)
                d = (i * hx, (j + 1) * hx)
                va, vb = self._vid(i, j), self._vid(i + 1, j)
                vc, vd = self._vid(i + 1, j + 1), self._vid(i, j + 1)
                cells.append((va, vb, vc))
                cell_coords.append((a, b, c))
                cells.append((va, vc, vd))
                cell_coords.append((a, c, d))
        self.cells = np.array(cells, dtype=np.int64)
        self.cell_coords = np.array(cell_coords, dtype=float)  # (nc, 3, 2)
        self.num_cells = len(cells)

        # affine map x = x0 + J xi from the reference triangle (0,0)-(1,0)-(0,1)
        v0 = self.cell_coords[:, 0]
        self.jac = np.stack(
            [self.cell_coords[:, 1] - v0, self.cell_coords[:, 2] - v0], axis=-1
        )  # (nc, 2, 2)
        self.detJ = np.linalg.det(self.jac)
        if np.any(self.detJ <= 0):
            raise MeshError("negative cell orientation")
        self.invJ = np.linalg.inv(self.jac)
        self.cell_origin = v0

        self._build_facets()

    def _midkey(self, mid):
        # edge midpoints sit on the (L / 2n) lattice; integer keys are exact
        n = self.n
        kx = round(mid[0] / self.L * 2 * n)
        ky = round(mid[1] / self.L * 2 * n)
        if self.periodic:
            kx %= 2 * n
            ky %= 2 * n
        return (kx, ky)

    def _build_facets(self):
        facets = {}
        order = []
        for c in range(self.num_cells):
            xc = self.cell_coords[c]
            for e in range(3):
                pA = xc[(e + 1) % 3]
                pB = xc[(e + 2) % 3]
                mid = 0.5 * (pA + pB)
                key = self._midkey(mid)
                if key not in facets:
                    d = pB - pA
                    length = float(np.hypot(*d))
                    normal = np.array([d[1], -d[0]]) / length
                    facets[key] = Facet(
                        index=-1,
                        vertices=(self.cells[c][(e + 1) % 3], self.cells[c][(e + 2) % 3]),
                        coords=np.array([pA, pB]),
                        normal=normal,
                        length=length,
                        cell_plus=c,
                        edge_plus=e,
                    )
                    order.append(key)
                else:
                    f = facets[key]
                    if f.cell_minus is not None:
                        raise MeshError("facet shared by more than two cells")
                    f.cell_minus = c
                    f.edge_minus = e
                    dirF = f.coords[1] - f.coords[0]
                    f.flip_minus = bool(np.dot(dirF, pB - pA) < 0)
                    # translation from the K+ copy of the facet to the K- copy
                    f.offset_minus = 0.5 * (pA + pB) - 0.5 * (f.coords[0] + f.coords[1])

        self.facets = []
        for i, key in enumerate(order):
            f = facets[key]
            f.index = i
            self.facets.append(f)
        self.num_facets = len(self.facets)
        self.interior_facets = np.array(
            [f.index for f in self.facets if f.interior], dtype=np.int64
        )
        self.boundary_facets = np.array(
            [f.index for f in self.facets if not f.interior], dtype=np.int64
        )
        if self.periodic and len(self.boundary_facets):
            raise MeshError("periodic mesh has unmatched facets")

        # local edge -> facet index, per cell
        self.cell_facets = np.full((self.num_cells, 3), -1, dtype=np.int64)
        for f in self.facets:
            self.cell_facets[f.cell_plus, f.edge_plus] = f.index
            if f.interior:
                self.cell_facets[f.cell_minus, f.edge_minus] = f.index
        if np.any(self.cell_facets < 0):
            raise MeshError("incomplete cell-facet connectivity")

    # -- geometry queries ------------------------------------------------

    @property
    def h(self):
        return math.sqrt(2.0) * self.L / self.n

    def cell_areas(self):
        return 0.5 * self.detJ

    def to_reference(self, cell, x):
        """Map physical points (..., 2) into reference coordinates of a cell."""
        return (x - self.cell_origin[cell]) @ self.invJ[cell].T

    def from_reference(self, cell, xi):
        return self.cell_origin[cell] + xi @ self.jac[cell].T

    def facet_points(self, facet, s):
        """Physical points on a facet for parameters s in [0, 1] (K+ copy)."""
        f = self.facets[facet] if isinstance(facet, (int, np.integer)) else facet
        s = np.asarray(s, dtype=float)
        return f.coords[0] + np.outer(s, f.coords[1] - f.coords[0])


# -- quadrature -----------------------------------------------------------


def gauss_segment(degree):
    """Gauss-Legendre rule on [0, 1] exact for polynomials of the degree."""
    if degree < 1:
        raise ValueError("quadrature degree must be >= 1")
    npts = (degree + 2) // 2
    x, w = leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def facet_quadrature(facet, degree):
    """Quadrature points (physical) and weights on a facet; weights sum to h_F."""
    s, w = gauss_segment(degree)
    pts = facet.coords[0] + np.outer(s, facet.coords[1] - facet.coords[0])
    return pts, w * facet.length


_REF_RULE_CACHE = {}


def reference_triangle_quadrature(degree):
    """Rule on the reference triangle (0,0)-(1,0)-(0,1), exact to `degree`.

    Weights sum to the reference area 1/2. Low degrees use the classical
    symmetric rules; higher degrees fall back to a collapsed Gauss-Jacobi
    product rule (exact, slightly more points).
    """
    if degree < 1:
        raise ValueError("quadrature degree must be >= 1")
    if degree in _REF_RULE_CACHE:
        return _REF_RULE_CACHE[degree]
    if degree == 1:
        pts = np.array([[1 / 3, 1 / 3]])
        wts = np.array([0.5])
    elif degree == 2:
        pts = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
        wts = np.full(3, 1 / 6)
    else:
        m = (degree + 2) // 2
        u, wu = leggauss(m)           # direction along the collapsed edge
        u = 0.5 * (u + 1.0)
        wu = 0.5 * wu
        t, wt = roots_jacobi(m, 1, 0)  # weight (1 - t) absorbs the Jacobian
        v = 0.5 * (t + 1.0)
        wv = 0.25 * wt
        V, U = np.meshgrid(v, u, indexing="ij")
        pts = np.column_stack([V.ravel(), (U * (1.0 - V)).ravel()])
        wts = np.outer(wv, wu).ravel()
    _REF_RULE_CACHE[degree] = (pts, wts)
    return pts, wts


def cell_quadrature(mesh, cell, degree):
    """Physical quadrature on one cell; weights sum to the cell area."""
    xi, w = reference_triangle_quadrature(degree)
    return mesh.from_reference(cell, xi), w * mesh.detJ[cell]


def build_square_mesh(n, L, periodic=False):
    return Mesh(n, L, periodic=periodic)
