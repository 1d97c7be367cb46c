"""LDG discrete gradient, stabilization, and energy assembly.

The discrete gradient G maps piecewise-P_k coefficients to piecewise-P_{k-1}
vector coefficients through the defining identity

    integral(Gv . Phi) = integral(grad_pw v . Phi)
                         - sum over non-Neumann faces of
                           integral_S([v] {Phi} . nu)

for all piecewise-P_{k-1} vector fields Phi, where [v] is the jump (plus
minus minus, plus being the lower cell index; the trace on boundary faces)
and {Phi} the average (the trace on boundary faces).  Because the basis is
orthonormal, G is assembled once as a sparse matrix Dvol - L with exact
face/volume quadrature.

The energy of a coefficient vector v is

    E(v) = integral(W(Gv)) + (1/r) sum_S h_S^{-s} integral_S |[v]|^r
           - integral(f_h v),

with every nonlinear volume integral evaluated by a fixed quadrature rule of
degree 2*p*k + 1 (p the growth exponent of W) and every face integral by a
Gauss rule of the same degree.  Gradients and Hessians are exact derivatives
of this quadrature-discretized functional, which is what makes the discrete
duality identities in :mod:`ldgmin.duality` hold to solver precision.  For
r = 2 the stabilization integrand is a polynomial and the face rule is
exact; for other r the same rule is applied (a documented approximation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import femspace
from .densities import EnergyDensity
from .femspace import DgFunction, DgSpace
from .mesh import BoundarySpec, Mesh

__all__ = [
    "EnergyEvaluationError",
    "ProblemConfig",
    "LdgOperator",
    "assemble_gradient",
    "EnergyFunctional",
    "energy",
    "gradient",
    "hessian",
    "stabilization",
]


class EnergyEvaluationError(RuntimeError):
    """Raised when the energy density evaluates to a non-finite value."""


@dataclass
class ProblemConfig:
    """Everything defining one discrete minimization problem.

    Parameters
    ----------
    density : EnergyDensity
        Convex energy density W used by the solver (for nonsmooth problems,
        pass the regularized density here and the nonsmooth one as
        ``estimator_density``).
    k : int
        Polynomial degree of the primal space (>= 1).
    boundary : BoundarySpec
        Dirichlet/Neumann splitting of the boundary.
    load : callable
        Right-hand side f; maps points of shape (..., 2) to values (...).
    r, s : float
        Stabilization exponent (r > 1) and face-weight exponent (s > 0).
    epsilon : float, optional
        Regularization parameter recorded for bookkeeping (the densities
        themselves are already built with it).
    estimator_density : EnergyDensity, optional
        Density used by the a posteriori estimator; defaults to ``density``.
    quad_degree : int, optional
        Override of the nonlinear quadrature degree (default 2*p*k + 1).
    name : str
        Label used in reports.
    warmup : tuple of ProblemConfig
        Optional continuation chain: when a solve starts without a warm
        start, these configurations are minimized in order and each
        minimizer initializes the next (used to reach small regularization
        parameters robustly).
    """

    density: EnergyDensity
    k: int
    boundary: BoundarySpec
    load: Callable[[np.ndarray], np.ndarray]
    r: float = 2.0
    s: float = 1.0
    epsilon: Optional[float] = None
    estimator_density: Optional[EnergyDensity] = None
    quad_degree: Optional[int] = None
    name: str = ""
    warmup: tuple = ()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("polynomial degree k must be >= 1")
        if not self.r > 1.0:
            raise ValueError("stabilization exponent r must be > 1")
        if not self.s > 0.0:
            raise ValueError("face-weight exponent s must be > 0")
        if self.quad_degree is None:
            p = float(self.density.p)
            self.quad_degree = max(int(math.ceil(2.0 * p * self.k)) + 1,
                                   2 * self.k + 1)

    @property
    def r_conj(self) -> float:
        """Dual exponent r' = r / (r - 1)."""
        return self.r / (self.r - 1.0)

    @property
    def eta_density(self) -> EnergyDensity:
        """Density used by the error estimator."""
        return self.estimator_density or self.density


class LdgOperator:
    """Discrete gradient operator and the face data shared by all assembly.

    Attributes
    ----------
    space : DgSpace
    G : scipy.sparse.csr_matrix
        (2 * dim(P_{k-1}) * T, dim(P_k) * T) discrete gradient matrix.
    Dvol : scipy.sparse.bsr_matrix
        Block-diagonal broken-gradient part of G (used for the discrete
        divergence, which is its negative transpose plus a face term).
    """

    def __init__(self, mesh: Mesh, k: int,
                 boundary: Optional[BoundarySpec] = None):
        if boundary is not None:
            labels = _classify_labels(mesh, boundary)
        else:
            labels = mesh.face_labels
        self.space = DgSpace(mesh, k)
        self.k = k
        self.labels = labels

        # active = jump-carrying faces (everything except Neumann)
        act = np.nonzero(labels != "N")[0]
        self.active = act
        self.interior = labels[act] == "I"
        self.plus = mesh.face_cells[act, 0]
        minus_raw = mesh.face_cells[act, 1]
        self.minus = np.where(minus_raw < 0, 0, minus_raw)
        self.has_minus = minus_raw >= 0
        self.face_h = mesh.face_h[act]
        self.normals = mesh.face_normals[act]
        self.avg_weight = np.where(self.interior, 0.5, 1.0)
        self._tables = {}

        self.Dvol = self._assemble_volume()
        self.G = (self.Dvol - self._assemble_face()).tocsr()
        self.G.sum_duplicates()

    # -- assembly ---------------------------------------------------------
    def _assemble_volume(self) -> sp.bsr_matrix:
        space, k = self.space, self.k
        dk, dkm1 = space.dim_cell, femspace.dimension(k - 1)
        rule = femspace.triangle_quadrature(max(2 * k, 1))
        psi, dxi, deta = femspace.reference_basis(k, rule.points, grad=True)
        w = rule.weights
        # R[d, m, j] = integral over the reference triangle of
        #              (d-th reference derivative of psi_j) * psi_m
        R = np.stack([
            np.einsum("q,mq,jq->mj", w, psi[:dkm1], dxi),
            np.einsum("q,mq,jq->mj", w, psi[:dkm1], deta),
        ])
        # physical chain rule: the 2|K| Jacobian and the two 1/scale basis
        # factors cancel exactly, leaving the inverse-Jacobian contraction
        blocks = np.einsum("tdc,dmj->tcmj", space.jac_inv, R)
        T = space.num_cells
        data = blocks.reshape(T, 2 * dkm1, dk)
        return sp.bsr_matrix(
            (data, np.arange(T), np.arange(T + 1)),
            shape=(2 * dkm1 * T, dk * T))

    def _assemble_face(self) -> sp.csr_matrix:
        space, k = self.space, self.k
        dk, dkm1 = space.dim_cell, femspace.dimension(k - 1)
        T = space.num_cells
        tw, tp, tm = self.tables(2 * k)

        rows, cols, vals = [], [], []
        side_cells = {"p": self.plus, "m": self.minus}
        side_tr = {"p": tp, "m": tm}
        side_sign = {"p": 1.0, "m": -1.0}
        for A in ("p", "m"):       # average side (test function Phi)
            wA = self.avg_weight if A == "p" else \
                np.where(self.has_minus, 0.5, 0.0)
            for B in ("p", "m"):   # jump side (trial function v)
                sB = side_sign[B]
                blk = np.einsum("f,q,fqm,fqj->fmj", self.face_h * wA * sB,
                                tw, side_tr[A][:, :, :dkm1], side_tr[B])
                # rows (cell_A, c, m); cols (cell_B, j)
                r = (side_cells[A][:, None, None, None] * (2 * dkm1)
                     + np.arange(2)[None, :, None, None] * dkm1
                     + np.arange(dkm1)[None, None, :, None])
                c = (side_cells[B][:, None, None, None] * dk
                     + np.arange(dk)[None, None, None, :])
                v = (self.normals[:, :, None, None]
                     * blk[:, None, :, :])
                rows.append(np.broadcast_to(r, v.shape).ravel())
                cols.append(np.broadcast_to(c, v.shape).ravel())
                vals.append(v.ravel())
        L = sp.coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * dkm1 * T, dk * T))
        return L.tocsr()

    # -- shared face tables -------------------------------------------------
    def tables(self, degree: int):
        """(weights, plus trace, minus trace) on active faces at ``degree``."""
        if degree not in self._tables:
            fb = self.space.face_bundle(degree)
            self._tables[degree] = (fb.t_weights,
                                    fb.trace_plus[self.active],
                                    fb.trace_minus[self.active])
        return self._tables[degree]

    def jump_values(self, coeffs: np.ndarray, degree: int) -> np.ndarray:
        """Jumps [v] at the face quadrature nodes, shape (n_active, Q)."""
        tw, tp, tm = self.tables(degree)
        cc = coeffs.reshape(self.space.num_cells, self.space.dim_cell)
        return (np.einsum("fqj,fj->fq", tp, cc[self.plus])
                - np.einsum("fqj,fj->fq", tm, cc[self.minus]))

    def average_normal_values(self, proj: np.ndarray, degree: int):
        """{Pi^{k-1} tau} . nu at face nodes for coefficients (T, 2, dkm1)."""
        tw, tp, tm = self.tables(degree)
        dkm1 = proj.shape[-1]
        vp = np.einsum("fqm,fcm->fqc", tp[:, :, :dkm1], proj[self.plus])
        vm = np.einsum("fqm,fcm->fqc", tm[:, :, :dkm1], proj[self.minus])
        avg = (self.avg_weight[:, None, None] * vp
               + np.where(self.has_minus, 0.5, 0.0)[:, None, None] * vm)
        return np.einsum("fqc,fc->fq", avg, self.normals)


def _classify_labels(mesh: Mesh, boundary: BoundarySpec) -> np.ndarray:
    labels = np.array(mesh.face_labels, copy=True)
    bd = mesh.face_cells[:, 1] < 0
    mids = mesh.vertices[mesh.face_vertices[bd]].mean(axis=1)
    is_dir = np.asarray(boundary.classify(mids), dtype=bool)
    labels[bd] = np.where(is_dir, "D", "N")
    return labels


def assemble_gradient(mesh: Mesh, k: int,
                      boundary: Optional[BoundarySpec] = None) -> LdgOperator:
    """Assemble the LDG discrete gradient operator on ``mesh``.

    ``boundary`` optionally overrides the mesh's own boundary splitting.
    Neumann faces carry neither jumps nor stabilization.
    """
    return LdgOperator(mesh, k, boundary)


class EnergyFunctional:
    """Value / gradient / Hessian of the discrete energy for one config.

    Precomputes the load projection f_h and the face tables; reuse one
    instance for repeated evaluations (the free functions :func:`energy`,
    :func:`gradient`, :func:`hessian` construct a fresh one each call).
    """

    def __init__(self, op: LdgOperator, cfg: ProblemConfig):
        self.op = op
        self.cfg = cfg
        self.space = op.space
        self.vb = self.space.volume_bundle(cfg.quad_degree)
        self.qdeg = cfg.quad_degree
        self.fh = self.space.project(cfg.load)
        self.F = self.fh.coeffs.ravel()
        self.dkm1 = femspace.dimension(op.k - 1)
        self._psi_low = self.vb.psi[: self.dkm1]
        self._stab_matrix = None  # cached for r == 2 (u-independent)

    # -- kinematics -------------------------------------------------------
    def broken_gradient(self, u: np.ndarray) -> np.ndarray:
        """Coefficients of Gv, shape (T, 2, dim P_{k-1})."""
        gu = self.op.G @ np.asarray(u, dtype=float).ravel()
        return gu.reshape(self.space.num_cells, 2, self.dkm1)

    def gradient_values(self, u: np.ndarray) -> np.ndarray:
        """Values of Gv at the volume quadrature nodes, shape (T, Q, 2)."""
        gu = self.broken_gradient(u)
        vals = np.einsum("tcm,mq->tqc", gu, self._psi_low)
        return vals / self.space.scale[:, None, None]

    def project_vector(self, values: np.ndarray) -> np.ndarray:
        """L2-project point values (T, Q, 2) onto P_{k-1}^2, as (T,2,dkm1)."""
        return np.einsum("t,q,tqc,mq->tcm", self.space.scale,
                         self.vb.weights, values, self._psi_low)

    def jumps(self, u: np.ndarray) -> np.ndarray:
        return self.op.jump_values(np.asarray(u, dtype=float), self.qdeg)

    # -- energy -----------------------------------------------------------
    def value(self, u: np.ndarray, on_overflow: str = "raise") -> float:
        """Discrete energy E(u).

        ``on_overflow='raise'`` raises :class:`EnergyEvaluationError` naming
        the first offending cell when the density is non-finite;
        ``'inf'`` returns +inf instead (used inside line searches).
        """
        u = np.asarray(u, dtype=float).ravel()
        gv = self.gradient_values(u)
        with np.errstate(over="ignore", invalid="ignore"):
            Wv = self.cfg.density.W(gv)
        if not np.all(np.isfinite(Wv)):
            if on_overflow == "inf":
                return float("inf")
            bad = int(np.nonzero(~np.isfinite(Wv).all(axis=1))[0][0])
            raise EnergyEvaluationError(
                f"energy density is non-finite on cell {bad}")
        E = float(np.einsum("t,q,tq->", self.space.det, self.vb.weights, Wv))
        E += self._stab_value(u) / self.cfg.r
        E -= float(self.F @ u)
        return E

    def _stab_value(self, u: np.ndarray) -> float:
        tw = self.op.tables(self.qdeg)[0]
        jv = self.jumps(u)
        hpow = self.op.face_h ** (1.0 - self.cfg.s)  # |S| * h^{-s}
        return float(np.einsum("f,q,fq->", hpow, tw,
                               np.abs(jv) ** self.cfg.r))

    def stabilization(self, v: np.ndarray, w: np.ndarray) -> float:
        """Bilinear stabilization s_h(v; w)."""
        tw = self.op.tables(self.qdeg)[0]
        jv = self.jumps(v)
        jw = self.jumps(w)
        hpow = self.op.face_h ** (1.0 - self.cfg.s)
        dens = np.abs(jv) ** (self.cfg.r - 2.0) * jv if self.cfg.r != 2.0 \
            else jv
        return float(np.einsum("f,q,fq->", hpow, tw, dens * jw))

    # -- gradient ---------------------------------------------------------
    def gradient(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float).ravel()
        gv = self.gradient_values(u)
        sigma = self.cfg.density.DW(gv)
        P = self.project_vector(sigma)
        g = self.op.G.T @ P.ravel() - self.F
        return g + self._stab_gradient(u)

    def _stab_gradient(self, u: np.ndarray) -> np.ndarray:
        op, cfg = self.op, self.cfg
        tw, tp, tm = op.tables(self.qdeg)
        jv = self.jumps(u)
        dens = np.abs(jv) ** (cfg.r - 2.0) * jv if cfg.r != 2.0 else jv
        # |S| h^{-s} sum_q tw dens trace
        w = (op.face_h ** (1.0 - cfg.s))[:, None] * tw[None, :] * dens
        contrib_p = np.einsum("fq,fqj->fj", w, tp)
        contrib_m = np.einsum("fq,fqj->fj", w, tm)
        out = np.zeros((self.space.num_cells, self.space.dim_cell))
        np.add.at(out, op.plus, contrib_p)
        np.add.at(out, op.minus, -contrib_m)
        return out.ravel()

    # -- Hessian ----------------------------------------------------------
    def hessian(self, u: np.ndarray) -> sp.csr_matrix:
        u = np.asarray(u, dtype=float).ravel()
        gv = self.gradient_values(u)
        D2 = self.cfg.density.D2W(gv)
        dkm1 = self.dkm1
        T = self.space.num_cells
        # the 2|K| area factor and the two 1/scale basis factors cancel
        blocks = np.einsum("q,tqab,mq,nq->tambn", self.vb.weights, D2,
                           self._psi_low, self._psi_low, optimize=True)
        Hvol = sp.bsr_matrix(
            (blocks.reshape(T, 2 * dkm1, 2 * dkm1),
             np.arange(T), np.arange(T + 1)),
            shape=(2 * dkm1 * T, 2 * dkm1 * T))
        H = (self.op.G.T @ (Hvol @ self.op.G)).tocsr()
        return (H + self._stab_hessian(u)).tocsr()

    def _stab_hessian(self, u: np.ndarray) -> sp.csr_matrix:
        if self.cfg.r == 2.0:
            if self._stab_matrix is None:
                self._stab_matrix = self._build_stab_matrix(None)
            return self._stab_matrix
        jv = self.jumps(u)
        wq = (self.cfg.r - 1.0) * np.abs(jv) ** (self.cfg.r - 2.0)
        return self._build_stab_matrix(wq)

    def _build_stab_matrix(self, point_weights) -> sp.csr_matrix:
        op, cfg, space = self.op, self.cfg, self.space
        dk = space.dim_cell
        T = space.num_cells
        tw, tp, tm = op.tables(self.qdeg)
        base = (op.face_h ** (1.0 - cfg.s))[:, None] * tw[None, :]
        if point_weights is not None:
            base = base * point_weights
        rows, cols, vals = [], [], []
        for trA, cA, sA in ((tp, op.plus, 1.0), (tm, op.minus, -1.0)):
            for trB, cB, sB in ((tp, op.plus, 1.0), (tm, op.minus, -1.0)):
                blk = sA * sB * np.einsum("fq,fqi,fqj->fij", base, trA, trB)
                r = cA[:, None, None] * dk + np.arange(dk)[None, :, None]
                c = cB[:, None, None] * dk + np.arange(dk)[None, None, :]
                rows.append(np.broadcast_to(r, blk.shape).ravel())
                cols.append(np.broadcast_to(c, blk.shape).ravel())
                vals.append(blk.ravel())
        M = sp.coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(dk * T, dk * T))
        return M.tocsr()


# -- free-function interface ------------------------------------------------
def energy(u, cfg: ProblemConfig, G: LdgOperator) -> float:
    """Discrete energy of ``u`` (DgFunction or coefficient array)."""
    return EnergyFunctional(G, cfg).value(_coeffs(u))


def gradient(u, cfg: ProblemConfig, G: LdgOperator) -> np.ndarray:
    """Gradient of the discrete energy at ``u`` (flat coefficient array)."""
    return EnergyFunctional(G, cfg).gradient(_coeffs(u))


def hessian(u, cfg: ProblemConfig, G: LdgOperator) -> sp.csr_matrix:
    """Hessian of the discrete energy at ``u`` (sparse CSR)."""
    return EnergyFunctional(G, cfg).hessian(_coeffs(u))


def stabilization(v, w, r: float = 2.0, s: float = 1.0,
                  degree: Optional[int] = None) -> float:
    """Stabilization form s_h(v; w) for two DG functions on one space.

    Exact for r = 2; for other r the integrand is nonpolynomial and the
    same Gauss rule is applied.
    """
    if not isinstance(v, DgFunction) or not isinstance(w, DgFunction):
        raise ValueError("stabilization expects DgFunction arguments")
    if v.space is not w.space:
        raise ValueError("stabilization arguments live on different spaces")
    space = v.space
    k = space.k
    degree = 2 * k + 1 if degree is None else degree
    fb = space.face_bundle(degree)
    labels = space.mesh.face_labels
    act = np.nonzero(labels != "N")[0]
    plus = space.mesh.face_cells[act, 0]
    minus_raw = space.mesh.face_cells[act, 1]
    minus = np.where(minus_raw < 0, 0, minus_raw)
    tp = fb.trace_plus[act]
    tm = fb.trace_minus[act]
    jv = (np.einsum("fqj,fj->fq", tp, v.cell_coeffs[plus])
          - np.einsum("fqj,fj->fq", tm, v.cell_coeffs[minus]))
    jw = (np.einsum("fqj,fj->fq", tp, w.cell_coeffs[plus])
          - np.einsum("fqj,fj->fq", tm, w.cell_coeffs[minus]))
    dens = np.abs(jv) ** (r - 2.0) * jv if r != 2.0 else jv
    hpow = space.mesh.face_h[act] ** (1.0 - s)
    return float(np.einsum("f,q,fq->", hpow, fb.t_weights, dens * jw))


def _coeffs(u) -> np.ndarray:
    if isinstance(u, DgFunction):
        return u.coeffs.ravel()
    return np.asarray(u, dtype=float).ravel()
