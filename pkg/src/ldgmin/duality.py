"""Discrete dual fields, divergence reconstruction, and the dual energy.

A dual field pairs a volume stress with one normal-trace polynomial per
face (zero on Neumann faces).  Its discrete divergence is the P_k function
defined by discrete integration by parts,

    integral(div_h tau . phi) = - integral(tau_M . grad_pw phi)
                                + sum over non-Neumann faces of
                                  integral_S(tau_S [phi]),

and the dual energy is

    E*(tau) = - integral(W*(tau_M)) - gamma(tau)/r'     if div_h tau = -f_h,
              -inf                                      otherwise,

with the face penalty gamma(tau) = sum_S h_S^{s/(r-1)} ||tau_S -
{Pi^{k-1} tau_M} . nu||^{r'}_{L^{r'}(S)}.  The maximizing dual variable is
built directly from a primal minimizer: volume part DW(Gu), face part the
averaged projected normal stress minus the jump penalty.  All integrals
use the same quadrature rules as the primal energy, which makes the strong
duality and divergence identities hold to solver precision rather than
merely to discretization accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import femspace
from .femspace import DgFunction, DgSpace, project_face_values
from .ldg_core import EnergyFunctional, LdgOperator, ProblemConfig

__all__ = [
    "DualField",
    "DualEnergyBreakdown",
    "dual_variable",
    "interp_dual",
    "div_reconstruct",
    "gamma_h",
    "dual_energy",
]


@dataclass
class DualField:
    """A discrete dual variable (volume stress + face normal traces).

    Attributes
    ----------
    space : DgSpace
        The primal space (fixes mesh, degree k, and caches).
    quad_degree : int
        Volume/face quadrature degree all evaluations of this field use.
    vol_values : ndarray, shape (T, Q, 2)
        Volume stress at the volume-rule quadrature points.
    proj : ndarray, shape (T, 2, dim P_{k-1})
        Coefficients of the componentwise L2 projection of the volume
        stress onto P_{k-1}(M)^2.
    face_coeffs : ndarray, shape (F, k+1)
        Per-face normal-trace polynomials in the orthonormal face basis
        (identically zero on Neumann faces).
    """

    space: DgSpace
    quad_degree: int
    vol_values: np.ndarray
    proj: np.ndarray
    face_coeffs: np.ndarray

    def face_values(self, degree: int | None = None) -> np.ndarray:
        """Normal-trace values at face quadrature nodes, shape (F, Q)."""
        fb = self.space.face_bundle(degree or self.quad_degree)
        ff = femspace.FaceField(self.space, self.space.k, self.face_coeffs)
        return ff.values(fb)


@dataclass
class DualEnergyBreakdown:
    """Dual energy split into its terms.

    ``total`` is -inf when the divergence constraint div tau = -f_h fails
    beyond the feasibility tolerance.
    """

    volume_term: float
    gamma: float
    divergence_residual: float
    feasible: bool
    total: float


def dual_variable(u, cfg: ProblemConfig, G: LdgOperator) -> DualField:
    """The dual maximizer built from a primal minimizer ``u``.

    Volume part DW(Gu); face part {Pi^{k-1} DW(Gu)} . nu minus the
    stabilization density h_S^{-s} |[u]|^{r-2} [u] (projected onto P_k per
    face), zero on Neumann faces.
    """
    fn = EnergyFunctional(G, cfg)
    coeffs = u.coeffs if isinstance(u, DgFunction) else np.asarray(u)
    gv = fn.gradient_values(coeffs)
    sigma = cfg.density.DW(gv)
    P = fn.project_vector(sigma)

    qdeg = cfg.quad_degree
    avg = G.average_normal_values(P, qdeg)            # (n_active, Q)
    ju = G.jump_values(coeffs, qdeg)
    dens = np.abs(ju) ** (cfg.r - 2.0) * ju if cfg.r != 2.0 else ju
    vals_active = avg - (G.face_h ** (-cfg.s))[:, None] * dens

    mesh = G.space.mesh
    fb = G.space.face_bundle(qdeg)
    allvals = np.zeros((mesh.num_faces, len(fb.t_weights)))
    allvals[G.active] = vals_active
    ff = project_face_values(G.space, fb, allvals, G.space.k)
    return DualField(space=G.space, quad_degree=qdeg, vol_values=sigma,
                     proj=P, face_coeffs=ff.coeffs)


def interp_dual(q, G: LdgOperator, degree: int | None = None) -> DualField:
    """Interpolate a pointwise vector field into the dual space.

    Volume part: componentwise L2 projection onto P_{k-1}(M)^2 (the volume
    values are kept for dual-energy evaluation); face part: per-face L2
    projection of the normal trace q . nu onto P_k(S).  Raises ValueError
    when the normal trace on a Neumann face exceeds 1e-12 (the dual space
    requires it to vanish there).
    """
    space = G.space
    if degree is None:
        degree = max(2 * space.k + 3, 2 * space.k + 1)
    vb = space.volume_bundle(degree)
    vals = np.asarray(q(vb.phys_points), dtype=float)
    dkm1 = femspace.dimension(space.k - 1)
    P = np.einsum("t,q,tqc,mq->tcm", space.scale, vb.weights, vals,
                  vb.psi[:dkm1])

    mesh = space.mesh
    fb = space.face_bundle(degree)
    fvals = np.asarray(q(fb.phys_points), dtype=float)
    nvals = np.einsum("fqc,fc->fq", fvals, mesh.face_normals)
    neumann = G.labels == "N"
    if neumann.any():
        worst = float(np.max(np.abs(nvals[neumann])))
        if worst > 1e-12 * (1.0 + float(np.max(np.abs(nvals)))):
            raise ValueError(
                "field has a nonzero normal trace on a Neumann face "
                f"(max {worst:.3e}); not a member of the dual space")
        nvals = nvals.copy()
        nvals[neumann] = 0.0
    ff = project_face_values(space, fb, nvals, space.k)
    return DualField(space=space, quad_degree=degree, vol_values=vals,
                     proj=P, face_coeffs=ff.coeffs)


def div_reconstruct(tau: DualField, G: LdgOperator) -> DgFunction:
    """Discrete divergence div_h tau as a P_k(M) function."""
    space = G.space
    d = -(G.Dvol.T @ tau.proj.ravel())
    vals = tau.face_values()[G.active]
    tw, tp, tm = G.tables(tau.quad_degree)
    w = (G.face_h)[:, None] * tw[None, :] * vals
    out = np.zeros((space.num_cells, space.dim_cell))
    np.add.at(out, G.plus, np.einsum("fq,fqj->fj", w, tp))
    np.add.at(out, G.minus, -np.einsum("fq,fqj->fj", w, tm))
    return DgFunction(space, d + out.ravel())


def gamma_h(tau: DualField, cfg: ProblemConfig, G: LdgOperator) -> float:
    """Dual face penalty gamma(tau)."""
    qdeg = tau.quad_degree
    tw = G.tables(qdeg)[0]
    mismatch = (tau.face_values()[G.active]
                - G.average_normal_values(tau.proj, qdeg))
    rc = cfg.r_conj
    hpow = G.face_h ** (cfg.s / (cfg.r - 1.0) + 1.0)  # face length included
    return float(np.einsum("f,q,fq->", hpow, tw, np.abs(mismatch) ** rc))


def dual_energy(tau: DualField, cfg: ProblemConfig, G: LdgOperator,
                load_projection: DgFunction | None = None,
                feasibility_tolerance: float = 1e-9) -> DualEnergyBreakdown:
    """Dual energy E*(tau) with its breakdown.

    The divergence constraint div_h tau = -f_h is checked in L2 with the
    relative tolerance ``feasibility_tolerance``; an infeasible field gets
    total = -inf (the supremum over the missing constraint).
    """
    space = G.space
    vb = space.volume_bundle(tau.quad_degree)
    conj = cfg.density.conj(tau.vol_values)
    volume_term = float(np.einsum("t,q,tq->", space.det, vb.weights, conj))
    gam = gamma_h(tau, cfg, G)

    fh = load_projection or space.project(cfg.load)
    resid = div_reconstruct(tau, G) + fh
    res = resid.norm_l2()
    feasible = res <= feasibility_tolerance * (1.0 + fh.norm_l2())
    total = -volume_term - gam / cfg.r_conj if feasible else -np.inf
    return DualEnergyBreakdown(volume_term=volume_term, gamma=gam,
                               divergence_residual=res, feasible=feasible,
                               total=total)
