"""Polynomial bases, quadrature, projections, and evaluation of DG functions.

The reference triangle is T = {(xi, eta) : xi >= 0, eta >= 0, xi + eta <= 1}.
Each physical cell K carries the affine map F_K(xh) = p0 + A_K @ xh with
det A_K = 2|K| > 0.  The per-cell basis is an orthonormal modal basis on T
(collapsed-coordinate Jacobi construction, evaluated by stable recurrences),
pushed forward and scaled by 1/sqrt(2|K|), so that per-cell mass matrices are
the identity to machine precision.  Modes are ordered by total degree, hence
the first (k)(k+1)/2 modes of the P_k basis span P_{k-1} (hierarchical).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi, roots_jacobi, roots_legendre

__all__ = [
    "MAX_TRIANGLE_DEGREE",
    "MAX_EDGE_DEGREE",
    "QuadratureRule",
    "dimension",
    "triangle_quadrature",
    "edge_quadrature",
    "quadrature",
    "reference_basis",
    "DgSpace",
    "DgFunction",
    "FaceField",
    "project_cell",
    "project_face",
    "trace_values",
]

MAX_TRIANGLE_DEGREE = 50
MAX_EDGE_DEGREE = 100


def dimension(k: int) -> int:
    """Dimension of P_k on a triangle."""
    return (k + 1) * (k + 2) // 2


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature points and weights on the reference triangle or edge [0, 1].

    ``points`` has shape (n, 2) for triangles and (n,) for edges; weights sum
    to the reference measure (1/2 for the triangle, 1 for the edge).
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)


@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> QuadratureRule:
    """Rule integrating all polynomials of total degree <= ``degree`` on T.

    Symmetric positive rules are used for low degrees and a collapsed
    (Duffy-type) tensor Gauss-Legendre x Gauss-Jacobi rule above.  All weights
    are positive at every degree.
    """
    if degree < 0 or degree > MAX_TRIANGLE_DEGREE:
        raise ValueError(
            f"unsupported triangle quadrature degree {degree}; "
            f"maximum supported degree is {MAX_TRIANGLE_DEGREE}"
        )
    if degree <= 1:
        pts = np.array([[1.0 / 3.0, 1.0 / 3.0]])
        wts = np.array([0.5])
    elif degree == 2:
        pts = np.array([
            [1.0 / 6.0, 1.0 / 6.0],
            [2.0 / 3.0, 1.0 / 6.0],
            [1.0 / 6.0, 2.0 / 3.0],
        ])
        wts = np.full(3, 1.0 / 6.0)
    elif degree <= 5:
        # Classic 7-point degree-5 rule; orbit constants in closed form.
        s15 = np.sqrt(15.0)
        a1 = (6.0 + s15) / 21.0
        a2 = (6.0 - s15) / 21.0
        w0 = 9.0 / 40.0
        w1 = (155.0 + s15) / 1200.0
        w2 = (155.0 - s15) / 1200.0
        pts = np.array([
            [1.0 / 3.0, 1.0 / 3.0],
            [a1, a1], [1.0 - 2.0 * a1, a1], [a1, 1.0 - 2.0 * a1],
            [a2, a2], [1.0 - 2.0 * a2, a2], [a2, 1.0 - 2.0 * a2],
        ])
        wts = 0.5 * np.array([w0, w1, w1, w1, w2, w2, w2])
    else:
        n = (degree + 2) // 2
        xg, wg = roots_legendre(n)
        xg = 0.5 * (xg + 1.0)
        wg = 0.5 * wg
        yj, wj = roots_jacobi(n, 1.0, 0.0)
        yj = 0.5 * (yj + 1.0)
        wj = 0.25 * wj
        xi = np.outer(xg, 1.0 - yj).ravel()
        eta = np.broadcast_to(yj, (n, n)).ravel()
        pts = np.column_stack([xi, eta])
        wts = np.outer(wg, wj).ravel()
    return QuadratureRule(pts, wts, degree)


@lru_cache(maxsize=None)
def edge_quadrature(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for degree <= ``degree``."""
    if degree < 0 or degree > MAX_EDGE_DEGREE:
        raise ValueError(
            f"unsupported edge quadrature degree {degree}; "
            f"maximum supported degree is {MAX_EDGE_DEGREE}"
        )
    n = (degree + 2) // 2
    x, w = roots_legendre(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, degree)


def quadrature(degree: int, shape: str = "triangle") -> QuadratureRule:
    """Quadrature rule on ``shape`` in {'triangle', 'edge'}."""
    if shape == "triangle":
        return triangle_quadrature(degree)
    if shape == "edge":
        return edge_quadrature(degree)
    raise ValueError(f"unknown quadrature shape {shape!r}")


def _mode_indices(k: int) -> list[tuple[int, int]]:
    """(i, j) mode pairs ordered by total degree, then i ascending."""
    return [(i, d - i) for d in range(k + 1) for i in range(d + 1)]


def _q_factors(kmax: int, xi: np.ndarray, eta: np.ndarray, grad: bool):
    """Singularity-free Legendre factors q_i = (1-eta)^i P_i(2 xi/(1-eta) - 1).

    Computed by the three-term recurrence
    (i+1) q_{i+1} = (2i+1) z q_i - i (1-eta)^2 q_{i-1},  z = 2 xi + eta - 1,
    which is polynomial in (xi, eta) and stable at eta = 1.
    """
    z = 2.0 * xi + eta - 1.0
    ome2 = (1.0 - eta) ** 2
    q = [np.ones_like(xi)]
    if kmax >= 1:
        q.append(z.copy())
    for i in range(1, kmax):
        q.append(((2 * i + 1) * z * q[i] - i * ome2 * q[i - 1]) / (i + 1))
    if not grad:
        return q, None, None
    qx = [np.zeros_like(xi)]
    qe = [np.zeros_like(xi)]
    if kmax >= 1:
        qx.append(np.full_like(xi, 2.0))
        qe.append(np.ones_like(xi))
    for i in range(1, kmax):
        qx.append(((2 * i + 1) * (2.0 * q[i] + z * qx[i])
                   - i * ome2 * qx[i - 1]) / (i + 1))
        qe.append(((2 * i + 1) * (q[i] + z * qe[i])
                   - i * (ome2 * qe[i - 1] - 2.0 * (1.0 - eta) * q[i - 1]))
                  / (i + 1))
    return q, qx, qe


def reference_basis(k: int, points: np.ndarray, grad: bool = False):
    """Orthonormal basis of P_k on the reference triangle at ``points``.

    Returns ``values`` of shape (dim, n); with ``grad=True`` also returns
    (d/dxi, d/deta) arrays of the same shape.  The basis is L2-orthonormal on
    T and ordered by total degree (hierarchical).
    """
    points = np.asarray(points, dtype=float)
    xi = points[..., 0].ravel()
    eta = points[..., 1].ravel()
    modes = _mode_indices(k)
    q, qx, qe = _q_factors(k, xi, eta, grad)
    v = 2.0 * eta - 1.0
    values = np.empty((len(modes), xi.size))
    dxi = np.empty_like(values) if grad else None
    deta = np.empty_like(values) if grad else None
    for row, (i, j) in enumerate(modes):
        c = np.sqrt(2.0 * (2 * i + 1) * (i + j + 1))
        pj = eval_jacobi(j, 2 * i + 1, 0, v)
        values[row] = c * q[i] * pj
        if grad:
            if j >= 1:
                dpj = (j + 2 * i + 2) * eval_jacobi(j - 1, 2 * i + 2, 1, v)
            else:
                dpj = np.zeros_like(v)
            dxi[row] = c * qx[i] * pj
            deta[row] = c * (qe[i] * pj + q[i] * dpj)
    if grad:
        return values, dxi, deta
    return values


def _legendre01(deg: int, t: np.ndarray) -> np.ndarray:
    """Orthonormal Legendre basis on [0, 1]: rows m = 0..deg at points t."""
    x = 2.0 * np.asarray(t, dtype=float) - 1.0
    out = np.empty((deg + 1, x.size))
    out[0] = 1.0
    if deg >= 1:
        out[1] = x
    for m in range(1, deg):
        out[m + 1] = ((2 * m + 1) * x * out[m] - m * out[m - 1]) / (m + 1)
    scale = np.sqrt(2.0 * np.arange(deg + 1) + 1.0)
    return out * scale[:, None]


class _VolumeBundle:
    """Per-(space, degree) cache of reference data at a triangle rule."""

    def __init__(self, space: "DgSpace", degree: int):
        rule = triangle_quadrature(degree)
        self.degree = degree
        self.ref_points = rule.points
        self.weights = rule.weights
        self.psi, self.dpsi_xi, self.dpsi_eta = reference_basis(
            space.k, rule.points, grad=True)
        # physical points (T, Q, 2)
        mesh = space.mesh
        p0 = mesh.vertices[mesh.triangles[:, 0]]
        self.phys_points = (p0[:, None, :]
                            + np.einsum("tab,qb->tqa", space.jac, rule.points))


class _FaceBundle:
    """Per-(space, degree) cache of face-trace data at an edge rule.

    Faces are parameterized by arc length from the lower-index vertex.  Trace
    tables include the per-cell 1/sqrt(2|K|) scaling, i.e. they tabulate the
    physical basis functions restricted to the face.
    """

    def __init__(self, space: "DgSpace", degree: int):
        rule = edge_quadrature(degree)
        mesh = space.mesh
        self.degree = degree
        self.t_nodes = rule.points
        self.t_weights = rule.weights
        a = mesh.vertices[mesh.face_vertices[:, 0]]
        b = mesh.vertices[mesh.face_vertices[:, 1]]
        # (F, Q, 2) physical points along each face
        self.phys_points = (a[:, None, :]
                            + rule.points[None, :, None]
                            * (b - a)[:, None, :])
        self.chi = _legendre01(space.k, rule.points)  # (k+1, Q), no 1/sqrt|S|

        def ref_coords(cells):
            p0 = mesh.vertices[mesh.triangles[cells, 0]]
            d = self.phys_points - p0[:, None, :]
            return np.einsum("tab,tqb->tqa", space.jac_inv[cells], d)

        plus = mesh.face_cells[:, 0]
        minus = mesh.face_cells[:, 1]
        self.ref_plus = ref_coords(plus)
        psi = reference_basis(space.k, self.ref_plus.reshape(-1, 2))
        self.trace_plus = (psi.reshape(space.dim_cell, len(a), -1)
                           .transpose(1, 2, 0)
                           / space.scale[plus][:, None, None])
        interior = minus >= 0
        self.trace_minus = np.zeros_like(self.trace_plus)
        if interior.any():
            cells = minus[interior]
            p0 = mesh.vertices[mesh.triangles[cells, 0]]
            d = self.phys_points[interior] - p0[:, None, :]
            ref = np.einsum("tab,tqb->tqa", space.jac_inv[cells], d)
            psi_m = reference_basis(space.k, ref.reshape(-1, 2))
            self.trace_minus[interior] = (
                psi_m.reshape(space.dim_cell, cells.size, -1)
                .transpose(1, 2, 0) / space.scale[cells][:, None, None])


class DgSpace:
    """Piecewise P_k space on a triangulation with an orthonormal cell basis."""

    def __init__(self, mesh, k: int):
        if k < 1:
            raise ValueError("polynomial degree k must be >= 1")
        self.mesh = mesh
        self.k = k
        self.dim_cell = dimension(k)
        self.num_cells = len(mesh.triangles)
        self.ndof = self.num_cells * self.dim_cell
        v = mesh.vertices
        t = mesh.triangles
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        self.jac = np.stack([e1, e2], axis=-1)  # columns e1, e2
        self.det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]  # = 2|K| > 0
        if np.any(self.det <= 0):
            raise ValueError("mesh contains a non-CCW or degenerate triangle")
        inv = np.empty_like(self.jac)
        inv[:, 0, 0] = e2[:, 1]
        inv[:, 0, 1] = -e2[:, 0]
        inv[:, 1, 0] = -e1[:, 1]
        inv[:, 1, 1] = e1[:, 0]
        self.jac_inv = inv / self.det[:, None, None]
        self.scale = np.sqrt(self.det)  # sqrt(2|K|)
        self._volume_bundles: dict[int, _VolumeBundle] = {}
        self._face_bundles: dict[int, _FaceBundle] = {}

    # -- caches ---------------------------------------------------------
    def volume_bundle(self, degree: int) -> _VolumeBundle:
        if degree not in self._volume_bundles:
            self._volume_bundles[degree] = _VolumeBundle(self, degree)
        return self._volume_bundles[degree]

    def face_bundle(self, degree: int) -> _FaceBundle:
        if degree not in self._face_bundles:
            self._face_bundles[degree] = _FaceBundle(self, degree)
        return self._face_bundles[degree]

    # -- construction of functions --------------------------------------
    def function(self, coeffs=None) -> "DgFunction":
        if coeffs is None:
            coeffs = np.zeros(self.ndof)
        coeffs = np.asarray(coeffs, dtype=float).reshape(self.ndof)
        return DgFunction(self, coeffs)

    def project(self, f, degree: int | None = None) -> "DgFunction":
        """Cellwise L2 projection of a pointwise field onto P_k(M).

        ``f`` maps an (..., 2) array of physical points to values.  The
        default rule is generous so that smooth fields project with
        orthogonality defects well below 1e-11.
        """
        if degree is None:
            degree = min(2 * self.k + 21, MAX_TRIANGLE_DEGREE)
        b = self.volume_bundle(degree)
        vals = np.asarray(f(b.phys_points), dtype=float)
        coeffs = self.scale[:, None] * np.einsum(
            "q,mq,tq->tm", b.weights, b.psi, vals)
        return DgFunction(self, coeffs.ravel())

    # -- evaluation ------------------------------------------------------
    def cell_values(self, u: "DgFunction", bundle: _VolumeBundle) -> np.ndarray:
        """Values of u at the bundle's quadrature points, shape (T, Q)."""
        c = u.cell_coeffs
        return np.einsum("tm,mq->tq", c, bundle.psi) / self.scale[:, None]

    def cell_gradient_values(self, u: "DgFunction",
                             bundle: _VolumeBundle) -> np.ndarray:
        """Piecewise gradient of u at quadrature points, shape (T, Q, 2)."""
        c = u.cell_coeffs
        gx = np.einsum("tm,mq->tq", c, bundle.dpsi_xi)
        ge = np.einsum("tm,mq->tq", c, bundle.dpsi_eta)
        # grad = A^{-T} (gx, ge) / scale;  (A^{-T})_{cd} = jac_inv[d, c]
        out = np.empty((self.num_cells, bundle.weights.size, 2))
        out[:, :, 0] = (self.jac_inv[:, 0, 0, None] * gx
                        + self.jac_inv[:, 1, 0, None] * ge)
        out[:, :, 1] = (self.jac_inv[:, 0, 1, None] * gx
                        + self.jac_inv[:, 1, 1, None] * ge)
        return out / self.scale[:, None, None]

    def eval_cellwise(self, u: "DgFunction", cells: np.ndarray,
                      points: np.ndarray) -> np.ndarray:
        """Evaluate u on given cells at given physical points (n, 2)."""
        cells = np.asarray(cells, dtype=int)
        points = np.asarray(points, dtype=float)
        p0 = self.mesh.vertices[self.mesh.triangles[cells, 0]]
        ref = np.einsum("nab,nb->na", self.jac_inv[cells], points - p0)
        psi = reference_basis(self.k, ref)
        return (np.einsum("nm,mn->n", u.cell_coeffs[cells], psi)
                / self.scale[cells])

    def integrate(self, values: np.ndarray, bundle: _VolumeBundle) -> float:
        """Integrate per-point values (T, Q) over the mesh."""
        return float(np.einsum("t,q,tq->", self.det, bundle.weights, values))

    def cell_integrals(self, values: np.ndarray,
                       bundle: _VolumeBundle) -> np.ndarray:
        """Per-cell integrals of values (T, Q), shape (T,)."""
        return self.det * (values @ bundle.weights)

    # -- face traces ------------------------------------------------------
    def face_values(self, u: "DgFunction", bundle: _FaceBundle):
        """(plus, minus) trace values of u on all faces, each (F, Q).

        On boundary faces the minus trace is zero.
        """
        c = u.cell_coeffs
        mesh = self.mesh
        plus = np.einsum("fqm,fm->fq", bundle.trace_plus,
                         c[mesh.face_cells[:, 0]])
        minus_cells = np.where(mesh.face_cells[:, 1] >= 0,
                               mesh.face_cells[:, 1], 0)
        minus = np.einsum("fqm,fm->fq", bundle.trace_minus, c[minus_cells])
        return plus, minus

    def face_jumps(self, u: "DgFunction", bundle: _FaceBundle) -> np.ndarray:
        """[u]_S at face quadrature points; on boundary faces the trace."""
        plus, minus = self.face_values(u, bundle)
        return plus - minus

    def face_averages(self, u: "DgFunction", bundle: _FaceBundle) -> np.ndarray:
        """{u}_S at face quadrature points; on boundary faces the trace."""
        plus, minus = self.face_values(u, bundle)
        interior = (self.mesh.face_cells[:, 1] >= 0)[:, None]
        return np.where(interior, 0.5 * (plus + minus), plus)


@dataclass
class DgFunction:
    """A piecewise polynomial in P_k(M), coefficients in the cell basis."""

    space: DgSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(
            self.space.ndof)

    @property
    def cell_coeffs(self) -> np.ndarray:
        """View of shape (num_cells, dim_cell)."""
        return self.coeffs.reshape(self.space.num_cells, self.space.dim_cell)

    def copy(self) -> "DgFunction":
        return DgFunction(self.space, self.coeffs.copy())

    def __add__(self, other: "DgFunction") -> "DgFunction":
        return DgFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other: "DgFunction") -> "DgFunction":
        return DgFunction(self.space, self.coeffs - other.coeffs)

    def __rmul__(self, a: float) -> "DgFunction":
        return DgFunction(self.space, float(a) * self.coeffs)

    def norm_l2(self) -> float:
        """L2(Omega) norm; equals the coefficient 2-norm (orthonormal basis)."""
        return float(np.linalg.norm(self.coeffs))


@dataclass
class FaceField:
    """One polynomial of degree <= deg per face, in the orthonormal
    Legendre basis of the arc-length parameterization from the lower-index
    vertex (coefficients include the 1/sqrt(|S|) normalization)."""

    space: DgSpace
    degree: int
    coeffs: np.ndarray  # (F, degree + 1)

    def values(self, bundle: _FaceBundle) -> np.ndarray:
        """Values at the bundle's face quadrature points, shape (F, Q)."""
        chi = bundle.chi[: self.degree + 1]
        h = self.space.mesh.face_h
        return np.einsum("fm,mq->fq", self.coeffs, chi) / np.sqrt(h)[:, None]


def project_face_values(space: DgSpace, bundle: _FaceBundle,
                        values: np.ndarray, degree: int) -> FaceField:
    """L2(S) projection of per-face point values (F, Q) onto P_degree(S)."""
    chi = bundle.chi[: degree + 1]
    h = space.mesh.face_h
    coeffs = np.sqrt(h)[:, None] * np.einsum(
        "q,mq,fq->fm", bundle.t_weights, chi, values)
    return FaceField(space, degree, coeffs)


def project_cell(f, mesh, k: int, degree: int | None = None) -> DgFunction:
    """Cellwise L2 projection onto P_k(M) (convenience wrapper)."""
    return DgSpace(mesh, k).project(f, degree=degree)


def project_face(g, mesh, face_index: int, k: int,
                 degree: int | None = None) -> np.ndarray:
    """L2 projection of a pointwise field on one face onto P_k(S).

    ``g`` maps (n, 2) physical points on the face to values; returns the
    (k+1,) coefficient vector in the face's orthonormal Legendre basis.
    """
    if degree is None:
        degree = min(2 * k + 21, MAX_EDGE_DEGREE)
    rule = edge_quadrature(degree)
    a = mesh.vertices[mesh.face_vertices[face_index, 0]]
    b = mesh.vertices[mesh.face_vertices[face_index, 1]]
    pts = a[None, :] + rule.points[:, None] * (b - a)[None, :]
    vals = np.asarray(g(pts), dtype=float)
    chi = _legendre01(k, rule.points)
    h = mesh.face_h[face_index]
    return np.sqrt(h) * np.einsum("q,mq,q->m", rule.weights, chi, vals)


def face_polynomial_values(mesh, face_index: int, coeffs: np.ndarray,
                           t: np.ndarray) -> np.ndarray:
    """Evaluate a face polynomial (orthonormal coefficients) at parameters t."""
    chi = _legendre01(len(coeffs) - 1, np.asarray(t, dtype=float))
    return (coeffs @ chi) / np.sqrt(mesh.face_h[face_index])


def trace_values(mesh, v: DgFunction, face_index: int, points: np.ndarray):
    """Jump [v]_S and average {v}_S of a DG function at points on a face.

    On boundary faces both equal the trace from the adjacent cell.  Points
    not lying on the face (distance or parameter out of range beyond 1e-12)
    raise a ValueError.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = mesh.vertices[mesh.face_vertices[face_index, 0]]
    b = mesh.vertices[mesh.face_vertices[face_index, 1]]
    d = b - a
    h2 = d @ d
    rel = points - a
    t = rel @ d / h2
    offset = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]) / np.sqrt(h2)
    if np.any(offset > 1e-12 * (1.0 + np.sqrt(h2))) or np.any(
            (t < -1e-12) | (t > 1.0 + 1e-12)):
        raise ValueError(f"point not on face {face_index}")
    space = v.space
    plus_cell, minus_cell = mesh.face_cells[face_index]
    vp = space.eval_cellwise(v, np.full(len(points), plus_cell), points)
    if minus_cell < 0:
        return vp.copy(), vp.copy()
    vm = space.eval_cellwise(v, np.full(len(points), minus_cell), points)
    return vp - vm, 0.5 * (vp + vm)
