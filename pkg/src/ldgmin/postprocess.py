"""Post-processing: conforming averaging, flux fitting, error indicators.

Two reconstructions turn a broken minimizer and its dual variable into
admissible test objects for the convex primal and dual functionals:

* :func:`nodal_average` maps a discontinuous field to a continuous one by
  averaging at the global Lagrange lattice (zero on the closure of the
  Dirichlet boundary), giving an admissible primal candidate.
* :func:`rt_fit` assembles a piecewise Raviart-Thomas vector field whose
  normal trace is single-valued across faces and whose divergence
  reproduces the broken divergence of the dual variable cell by cell,
  giving an admissible dual candidate.

:func:`estimate` integrates the pointwise convexity defect
``W(grad v) - sigma . grad v + W*(sigma)`` of the pair, which is
nonnegative by the Fenchel-Young inequality and sums to the difference of
the primal value at ``v`` and the dual value at ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .femspace import DgFunction, DgSpace, dimension, reference_basis

__all__ = [
    "ConformingFunction",
    "RtFunction",
    "EstimatorReport",
    "nodal_average",
    "rt_fit",
    "estimate",
    "divergence_residuals",
]


# ----------------------------------------------------------------------
# Conforming nodal averaging
# ----------------------------------------------------------------------

def _lattice(k: int) -> np.ndarray:
    """Reference Lagrange lattice of order k: vertices, edges, interior."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pts = [verts[0], verts[1], verts[2]]
    for a, b in ((0, 1), (1, 2), (0, 2)):
        for s in range(1, k):
            pts.append(verts[a] + (s / k) * (verts[b] - verts[a]))
    for i in range(1, k):
        for j in range(1, k - i):
            pts.append(np.array([i / k, j / k]))
    return np.array(pts)


@dataclass
class ConformingFunction:
    """Continuous piecewise polynomial built by nodal averaging.

    ``function`` is the representation in the discontinuous basis (the
    cellwise coefficients of a globally continuous field), ``node_values``
    the values at the global lattice nodes, and ``cell_nodes`` the (T, dim)
    map from cells to global node ids.
    """

    function: DgFunction
    node_values: np.ndarray
    cell_nodes: np.ndarray

    @property
    def space(self) -> DgSpace:
        return self.function.space


def _global_nodes(mesh, k: int) -> tuple[np.ndarray, int]:
    """Global lattice-node ids per cell, shape (T, dim), and node count.

    Ids are laid out as [vertices | per-face edge nodes | per-cell
    interior nodes]; edge nodes are counted from the lower-indexed
    vertex of the face so neighbouring cells agree on shared nodes.
    """
    nv, nf, nt = mesh.num_vertices, mesh.num_faces, mesh.num_cells
    dim = dimension(k)
    tri = mesh.triangles
    ids = np.empty((nt, dim), dtype=int)
    ids[:, :3] = tri

    fkeys = mesh.face_vertices[:, 0] * nv + mesh.face_vertices[:, 1]
    forder = np.argsort(fkeys)
    fsorted = fkeys[forder]
    col = 3
    for a, b in ((0, 1), (1, 2), (0, 2)):
        av, bv = tri[:, a], tri[:, b]
        lo, hi = np.minimum(av, bv), np.maximum(av, bv)
        f = forder[np.searchsorted(fsorted, lo * nv + hi)]
        for s in range(1, k):
            pos = np.where(av == lo, s, k - s)
            ids[:, col] = nv + f * (k - 1) + (pos - 1)
            col += 1
    n_int = dim - col
    base = nv + nf * (k - 1)
    if n_int:
        ids[:, col:] = (base + n_int * np.arange(nt)[:, None]
                        + np.arange(n_int)[None, :])
    return ids, base + n_int * nt


def _dirichlet_nodes(mesh, k: int, labels: np.ndarray) -> np.ndarray:
    """Node ids on the closure of the Dirichlet part of the boundary."""
    nv = mesh.num_vertices
    d = np.flatnonzero(labels == "D")
    parts = [np.unique(mesh.face_vertices[d].ravel())] if d.size else []
    if k > 1 and d.size:
        parts.append((nv + d[:, None] * (k - 1)
                      + np.arange(k - 1)[None, :]).ravel())
    return (np.concatenate(parts) if parts
            else np.empty(0, dtype=int))


def nodal_average(u: DgFunction, labels: np.ndarray | None = None
                  ) -> ConformingFunction:
    """Average a broken field into a continuous one, zero on Dirichlet.

    At every global Lagrange node the values from all cells containing
    the node are averaged with equal weights; nodes on the closure of
    Dirichlet faces are set to zero so the result is admissible.  Pass
    ``labels`` to override the mesh's own face labels (e.g. when the
    assembled operator reclassified the boundary).
    """
    space = u.space
    mesh = space.mesh
    k = space.k
    if labels is None:
        labels = mesh.face_labels

    lattice = _lattice(k)
    psi = reference_basis(k, lattice)                       # (dim, n_lat)
    vals = (u.cell_coeffs @ psi) / space.scale[:, None]     # (T, n_lat)

    ids, n_nodes = _global_nodes(mesh, k)
    acc = np.zeros(n_nodes)
    cnt = np.zeros(n_nodes)
    np.add.at(acc, ids.ravel(), vals.ravel())
    np.add.at(cnt, ids.ravel(), 1.0)
    nodal = acc / cnt
    nodal[_dirichlet_nodes(mesh, k, labels)] = 0.0

    vinv = np.linalg.inv(psi.T)                             # lattice -> modal
    coeffs = space.scale[:, None] * (nodal[ids] @ vinv.T)
    return ConformingFunction(DgFunction(space, coeffs), nodal, ids)


# ----------------------------------------------------------------------
# Raviart-Thomas flux fitting
# ----------------------------------------------------------------------

def _monomials(k: int) -> list[tuple[int, int]]:
    return [(d - j, j) for d in range(k + 1) for j in range(d + 1)]


def _rt_maps(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Maps from local coefficients to monomial coefficients.

    The local space is spanned by ``e_c X^alpha`` for ``|alpha| <= k``
    and ``X X^beta`` for ``|beta| = k`` in centred, diameter-scaled
    coordinates X.  Returns (C0, C1, D): the two Cartesian components in
    monomials of degree <= k+1 and the scaled divergence in monomials of
    degree <= k (divide by the cell diameter for the physical one).
    """
    mono1 = _monomials(k + 1)
    mono0 = _monomials(k)
    idx1 = {e: i for i, e in enumerate(mono1)}
    idx0 = {e: i for i, e in enumerate(mono0)}
    dk = dimension(k)
    nrt = (k + 1) * (k + 3)
    c0 = np.zeros((nrt, len(mono1)))
    c1 = np.zeros((nrt, len(mono1)))
    div = np.zeros((nrt, len(mono0)))
    for j, (a, b) in enumerate(mono0):
        c0[j, idx1[(a, b)]] = 1.0
        c1[dk + j, idx1[(a, b)]] = 1.0
        if a > 0:
            div[j, idx0[(a - 1, b)]] = a
        if b > 0:
            div[dk + j, idx0[(a, b - 1)]] = b
    for m in range(k + 1):
        j = 2 * dk + m
        c0[j, idx1[(k - m + 1, m)]] = 1.0
        c1[j, idx1[(k - m, m + 1)]] = 1.0
        # div(X p) = 2 p + X . grad p = (k + 2) p for homogeneous degree k
        div[j, idx0[(k - m, m)]] = float(k + 2)
    return c0, c1, div


def _mono_table(x: np.ndarray, k: int) -> np.ndarray:
    """Monomial values ``X1^a X2^b`` for a+b <= k, shape (..., n_mono)."""
    p = [np.ones(x.shape[:-1])]
    q = [np.ones(x.shape[:-1])]
    for _ in range(k):
        p.append(p[-1] * x[..., 0])
        q.append(q[-1] * x[..., 1])
    return np.stack([p[a] * q[b] for a, b in _monomials(k)], axis=-1)


@dataclass
class RtFunction:
    """Piecewise Raviart-Thomas field with single-valued normal traces.

    Coefficients are stored per cell in centred coordinates
    ``X = (x - centroid) / diameter``; components and divergence are
    pre-expanded into monomial form for fast pointwise evaluation.
    """

    mesh: object
    k: int
    coeffs: np.ndarray   # (T, (k+1)(k+3))
    _a0: np.ndarray = field(init=False, repr=False)
    _a1: np.ndarray = field(init=False, repr=False)
    _ad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.centroids = self.mesh.cell_centroids()
        self.diam = self.mesh.cell_h
        c0, c1, div = _rt_maps(self.k)
        self._a0 = self.coeffs @ c0
        self._a1 = self.coeffs @ c1
        self._ad = self.coeffs @ div

    # -- evaluation ----------------------------------------------------
    def values(self, points: np.ndarray) -> np.ndarray:
        """Field values at per-cell points (T, Q, 2) -> (T, Q, 2)."""
        x = ((points - self.centroids[:, None, :])
             / self.diam[:, None, None])
        table = _mono_table(x, self.k + 1)
        out = np.empty(points.shape)
        out[..., 0] = np.einsum("tn,tqn->tq", self._a0, table)
        out[..., 1] = np.einsum("tn,tqn->tq", self._a1, table)
        return out

    def divergence(self, points: np.ndarray) -> np.ndarray:
        """Divergence at per-cell points (T, Q, 2) -> (T, Q)."""
        x = ((points - self.centroids[:, None, :])
             / self.diam[:, None, None])
        table = _mono_table(x, self.k)
        return (np.einsum("tn,tqn->tq", self._ad, table)
                / self.diam[:, None])

    def eval_cells(self, cells: np.ndarray, points: np.ndarray
                   ) -> np.ndarray:
        """Values on selected cells at paired points (n, 2) -> (n, 2)."""
        cells = np.asarray(cells, dtype=int)
        x = (points - self.centroids[cells]) / self.diam[cells, None]
        table = _mono_table(x, self.k + 1)
        return np.stack([(self._a0[cells] * table).sum(axis=-1),
                         (self._a1[cells] * table).sum(axis=-1)], axis=-1)


def rt_fit(y) -> RtFunction:
    """Fit a Raviart-Thomas field to a dual variable's projected data.

    The degrees of freedom are the k+1 normal-trace moments per face and
    the moments against vector polynomials of degree k-1 per cell.  Face
    moments are prescribed by the dual variable's single-valued face
    coefficients (hence the normal trace is continuous and vanishes on
    Neumann faces), interior moments by its volume projection (hence the
    divergence of the fitted field equals the broken divergence).

    ``y`` is a ``duality.DualField``; only its ``space``, ``proj`` and
    ``face_coeffs`` attributes are used.
    """
    space: DgSpace = y.space
    mesh = space.mesh
    k = space.k
    dk = dimension(k)
    dkm1 = dimension(k - 1)
    nrt = (k + 1) * (k + 3)
    nfc = 3 * (k + 1)

    c0, c1, _ = _rt_maps(k)
    centroids = mesh.cell_centroids()
    diam = mesh.cell_h
    cf = mesh.cell_faces                                   # (T, 3)

    degree = 2 * k + 2
    fb = space.face_bundle(degree)
    vb = space.volume_bundle(degree)

    # face rows: sqrt(h) sum_q tw chi_m (b_j . nu) at the face points
    fpts = fb.phys_points[cf]                              # (T, 3, Q, 2)
    x = ((fpts - centroids[:, None, None, :])
         / diam[:, None, None, None])
    table = _mono_table(x, k + 1)                          # (T, 3, Q, n1)
    b0 = table @ c0.T                                      # (T, 3, Q, nrt)
    b1 = table @ c1.T
    nrm = mesh.face_normals[cf]                            # (T, 3, 2)
    bn = (nrm[..., 0, None, None] * b0
          + nrm[..., 1, None, None] * b1)                  # (T, 3, Q, nrt)
    rows_face = np.einsum("q,mq,teqj->temj", fb.t_weights, fb.chi, bn)
    rows_face *= np.sqrt(mesh.face_h[cf])[:, :, None, None]

    # interior rows: moments of each component against degree k-1 modes
    xv = ((vb.phys_points - centroids[:, None, :])
          / diam[:, None, None])
    tv = _mono_table(xv, k + 1)                            # (T, Qv, n1)
    p0 = tv @ c0.T                                         # (T, Qv, nrt)
    p1 = tv @ c1.T
    psi_low = vb.psi[:dkm1]
    rows_int = np.stack([
        np.einsum("q,mq,tqj->tmj", vb.weights, psi_low, p0),
        np.einsum("q,mq,tqj->tmj", vb.weights, psi_low, p1),
    ], axis=1) * space.scale[:, None, None, None]          # (T, 2, dkm1, nrt)

    system = np.concatenate([rows_face.reshape(-1, nfc, nrt),
                             rows_int.reshape(-1, 2 * dkm1, nrt)], axis=1)
    rhs = np.concatenate([y.face_coeffs[cf].reshape(-1, nfc),
                          y.proj.reshape(-1, 2 * dkm1)], axis=1)
    coeffs = np.linalg.solve(system, rhs[:, :, None])[:, :, 0]
    return RtFunction(mesh, k, coeffs)


# ----------------------------------------------------------------------
# Error estimation
# ----------------------------------------------------------------------

@dataclass
class EstimatorReport:
    """Per-cell indicators and the totals they certify.

    ``raw_indicators`` are the signed cell integrals of the convexity
    defect (tiny negative values can occur through roundoff only);
    ``indicators`` are clipped at zero for marking.  ``total`` is the sum
    of the raw values and equals ``primal_value - dual_value`` up to the
    divergence residual of the flux.
    """

    indicators: np.ndarray
    raw_indicators: np.ndarray
    total: float
    primal_value: float
    dual_value: float
    clipped_cells: int


def estimate(vc: ConformingFunction, sigma: RtFunction, cfg,
             load_projection: DgFunction | None = None,
             degree: int | None = None) -> EstimatorReport:
    """Integrate the convexity defect of an admissible primal/dual pair.

    Uses ``cfg.eta_density`` so a regularized solve can be measured
    against the unregularized energy.  ``primal_value`` is the primal
    functional at ``vc`` (no jump penalty: the field is continuous and
    vanishes on the Dirichlet boundary), ``dual_value`` the dual
    functional at ``sigma`` (no face mismatch: the normal trace is
    single-valued).
    """
    space = vc.space
    dens = cfg.eta_density
    vb = space.volume_bundle(cfg.quad_degree if degree is None else degree)

    grad = space.cell_gradient_values(vc.function, vb)      # (T, Q, 2)
    sig = sigma.values(vb.phys_points)                      # (T, Q, 2)
    defect = (dens.W(grad) - np.einsum("tqc,tqc->tq", sig, grad)
              + dens.conj(sig))
    raw = space.cell_integrals(defect, vb)
    clipped = np.maximum(raw, 0.0)

    fh = (space.project(cfg.load) if load_projection is None
          else load_projection)
    primal = (space.integrate(dens.W(grad), vb)
              - float(fh.coeffs @ vc.function.coeffs))
    dual = -space.integrate(dens.conj(sig), vb)
    return EstimatorReport(
        indicators=clipped,
        raw_indicators=raw,
        total=float(raw.sum()),
        primal_value=float(primal),
        dual_value=float(dual),
        clipped_cells=int(np.count_nonzero(raw < 0.0)),
    )


def divergence_residuals(sigma: RtFunction, fh: DgFunction,
                         degree: int | None = None) -> np.ndarray:
    """Per-cell L2 norms of ``div sigma + fh`` (exact quadrature)."""
    space = fh.space
    vb = space.volume_bundle(2 * space.k + 2 if degree is None else degree)
    dv = sigma.divergence(vb.phys_points)
    fv = space.cell_values(fh, vb)
    return np.sqrt(space.cell_integrals((dv + fv) ** 2, vb))
