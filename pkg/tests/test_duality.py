"""Dual variable construction and the exact discrete duality identities."""

import numpy as np
import pytest

from ldgmin import densities, duality, femspace, mesh
from ldgmin.ldg_core import EnergyFunctional, LdgOperator, ProblemConfig
from ldgmin.solver import minimize

from conftest import make_problem, unit_load


@pytest.fixture(scope="module")
def lmesh():
    return mesh.refine_uniform(mesh.initial_lshape(mesh.all_dirichlet()))


def _random_poly_field(rng, degree):
    coef = rng.uniform(-1, 1, size=(2, degree + 1, degree + 1))

    def q(x):
        out = np.zeros(x.shape[:-1] + (2,))
        for c in range(2):
            for i in range(degree + 1):
                for j in range(degree + 1 - i):
                    out[..., c] += (coef[c, i, j] * x[..., 0] ** i
                                    * x[..., 1] ** j)
        return out

    def divq(x):
        out = np.zeros(x.shape[:-1])
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                if i > 0:
                    out += i * coef[0, i, j] * x[..., 0] ** (i - 1) \
                        * x[..., 1] ** j
                if j > 0:
                    out += j * coef[1, i, j] * x[..., 0] ** i \
                        * x[..., 1] ** (j - 1)
        return out

    return q, divq


@pytest.mark.parametrize("k", [1, 2])
def test_divergence_reconstruction_consistency(k, lmesh):
    """div_h of the interpolated field equals the projected divergence."""
    rng = np.random.default_rng(47)
    op = LdgOperator(lmesh, k)
    space = op.space
    for _ in range(5):
        q, divq = _random_poly_field(rng, k + 1)
        tau = duality.interp_dual(q, op, degree=2 * k + 4)
        dh = duality.div_reconstruct(tau, op)
        pk = space.project(divq, degree=2 * k + 4)
        assert np.abs(dh.coeffs - pk.coeffs).max() < 1e-12


def test_interp_dual_rejects_nonzero_neumann_trace():
    segments = [((0.0, 0.0), (0.0, -1.0)), ((0.0, 0.0), (1.0, 0.0))]
    m = mesh.initial_lshape(mesh.boundary_from_segments(segments, "arms"))
    op = LdgOperator(m, 1)
    with pytest.raises(ValueError):
        duality.interp_dual(
            lambda x: np.stack([x[..., 0] ** 2, x[..., 1]], axis=-1), op)


def test_interp_dual_accepts_neumann_compatible_field():
    segments = [((0.0, 0.0), (0.0, -1.0)), ((0.0, 0.0), (1.0, 0.0))]
    m = mesh.initial_lshape(mesh.boundary_from_segments(segments, "arms"))
    op = LdgOperator(m, 1)
    # zero field is trivially compatible
    tau = duality.interp_dual(lambda x: np.zeros(x.shape[:-1] + (2,)), op)
    assert np.abs(tau.face_coeffs).max() == 0.0


@pytest.mark.parametrize("r", [2.0, 3.0])
def test_divergence_identity_at_any_state(r, lmesh):
    """div_h y(u) = -grad E_h(u) - f_h for every u, not just minimizers."""
    cfg = ProblemConfig(density=densities.p_laplace(2.0), k=2,
                        boundary=mesh.all_dirichlet(), load=unit_load, r=r)
    op = LdgOperator(lmesh, 2)
    fn = EnergyFunctional(op, cfg)
    rng = np.random.default_rng(53)
    u = femspace.DgFunction(op.space, 0.5 * rng.standard_normal(op.space.ndof))
    y = duality.dual_variable(u, cfg, op)
    g = fn.gradient(u.coeffs)
    resid = duality.div_reconstruct(y, op).coeffs + fn.fh.coeffs
    assert np.abs(resid + g).max() < 1e-12 * (1 + np.abs(g).max())


def test_gap_equals_gradient_pairing(lmesh):
    """E_h(u) - E*_h(y(u)) = grad E_h(u) . u for the quadratic case."""
    cfg = ProblemConfig(density=densities.p_laplace(2.0), k=1,
                        boundary=mesh.all_dirichlet(), load=unit_load)
    op = LdgOperator(lmesh, 1)
    fn = EnergyFunctional(op, cfg)
    rng = np.random.default_rng(59)
    u = femspace.DgFunction(op.space, rng.standard_normal(op.space.ndof))
    y = duality.dual_variable(u, cfg, op)
    bd = duality.dual_energy(y, cfg, op, load_projection=fn.fh,
                             feasibility_tolerance=np.inf)
    gap = fn.value(u.coeffs) - bd.total
    pairing = fn.gradient(u.coeffs) @ u.coeffs
    assert abs(gap - pairing) < 1e-11 * (1 + abs(gap))


def test_stabilization_identity_at_any_state(lmesh):
    """gamma_h(y(u)) = s_h(u) exactly for the quadratic penalty."""
    cfg = ProblemConfig(density=densities.p_laplace(2.0), k=2,
                        boundary=mesh.all_dirichlet(), load=unit_load)
    op = LdgOperator(lmesh, 2)
    fn = EnergyFunctional(op, cfg)
    rng = np.random.default_rng(61)
    u = femspace.DgFunction(op.space, rng.standard_normal(op.space.ndof))
    y = duality.dual_variable(u, cfg, op)
    gam = duality.gamma_h(y, cfg, op)
    sh = fn.stabilization(u.coeffs, u.coeffs)
    assert abs(gam - sh) < 1e-12 * (1 + sh)


@pytest.mark.parametrize("name,k", [("odp", 2), ("plaplace4", 1),
                                    ("bingham", 2)])
def test_strong_duality_at_minimizers(name, k, lmesh):
    cfg = make_problem(name, k, epsilon=1e-3)
    op = LdgOperator(lmesh, k)
    u, report = minimize(cfg, op)
    assert report.converged
    fn = EnergyFunctional(op, cfg)
    y = duality.dual_variable(u, cfg, op)
    bd = duality.dual_energy(y, cfg, op, load_projection=fn.fh)
    assert bd.feasible
    eh = fn.value(u.coeffs)
    assert abs(eh - bd.total) <= 1e-10 * (1 + abs(eh))


def test_weak_duality_feasible_fields(lmesh):
    """Feasible dual fields underestimate every primal energy value."""
    k = 1
    cfg = ProblemConfig(density=densities.p_laplace(2.0), k=k,
                        boundary=mesh.all_dirichlet(), load=unit_load)
    op = LdgOperator(lmesh, k)
    u, _ = minimize(cfg, op)
    fn = EnergyFunctional(op, cfg)
    eh = fn.value(u.coeffs)
    y = duality.dual_variable(u, cfg, op)

    # perturb the volume stress orthogonally to P_{k-1}^2: the divergence
    # and the face traces are untouched, so the field stays feasible while
    # the conjugate volume term strictly grows
    rng = np.random.default_rng(67)
    vb = op.space.volume_bundle(y.quad_degree)
    psi_low = vb.psi[: femspace.dimension(k - 1)]
    raw = rng.standard_normal(y.vol_values.shape)
    back = np.einsum("tcm,mq->tqc", fn.project_vector(raw), psi_low)
    perp = raw - back / op.space.scale[:, None, None]
    assert np.abs(fn.project_vector(perp)).max() < 1e-12

    best = duality.dual_energy(y, cfg, op, load_projection=fn.fh)
    for scale in (0.3, 1.0):
        z = duality.DualField(space=y.space, quad_degree=y.quad_degree,
                              vol_values=y.vol_values + scale * perp,
                              proj=y.proj, face_coeffs=y.face_coeffs)
        bd = duality.dual_energy(z, cfg, op, load_projection=fn.fh)
        assert bd.feasible
        assert bd.total < best.total
        assert bd.total <= eh + 1e-12 * (1 + abs(eh))

    # and the optimal dual value sits below every primal state
    for _ in range(10):
        v = u.coeffs + 0.1 * rng.standard_normal(u.coeffs.size)
        assert best.total <= fn.value(v) + 1e-12 * (1 + abs(eh))


def test_infeasible_field_gets_sentinel(lmesh):
    cfg = ProblemConfig(density=densities.p_laplace(2.0), k=1,
                        boundary=mesh.all_dirichlet(), load=unit_load)
    op = LdgOperator(lmesh, 1)
    u, _ = minimize(cfg, op)
    y = duality.dual_variable(u, cfg, op)
    bad = duality.DualField(space=y.space, quad_degree=y.quad_degree,
                            vol_values=y.vol_values, proj=y.proj + 1e-3,
                            face_coeffs=y.face_coeffs)
    bd = duality.dual_energy(bad, cfg, op)
    assert not bd.feasible
    assert bd.total == -np.inf


def test_dual_face_values_vanish_on_neumann():
    cfg = make_problem("plaplace4", 2)
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, 2)
    u, _ = minimize(cfg, op)
    y = duality.dual_variable(u, cfg, op)
    neumann = np.flatnonzero(m.face_labels == "N")
    assert neumann.size > 0
    assert np.abs(y.face_coeffs[neumann]).max() == 0.0
