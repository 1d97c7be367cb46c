"""Conforming averaging, flux reconstruction, and the error estimator."""

import numpy as np
import pytest

from ldgmin import densities, duality, femspace, mesh, postprocess
from ldgmin.ldg_core import EnergyFunctional, LdgOperator, ProblemConfig
from ldgmin.solver import minimize

from conftest import make_problem, unit_load


@pytest.fixture(scope="module")
def lmesh():
    return mesh.refine_uniform(mesh.initial_lshape(mesh.all_dirichlet()))


def _solve(name, k, m, **kw):
    cfg = make_problem(name, k, **kw)
    op = LdgOperator(m, k)
    u, report = minimize(cfg, op)
    assert report.converged
    return cfg, op, u


# -- nodal averaging ------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 3])
def test_averaging_fixes_continuous_fields(k, lmesh):
    """With no Dirichlet faces, averaging is the identity on the
    projection of any global P_k polynomial (already continuous)."""
    space = femspace.DgSpace(lmesh, k)
    free = np.where(lmesh.face_labels == "I", "I", "N")

    def f(x):
        return (x[..., 0] ** k - 0.5 * x[..., 1] ** k
                + 2.0 * x[..., 0] - 1.0)

    u = space.project(f)
    vc = postprocess.nodal_average(u, labels=free)
    assert np.abs(vc.function.coeffs - u.coeffs).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2, 3])
def test_averaging_reproduces_conforming_interpolant(k, lmesh):
    """Feeding nodal values of a smooth function through the averaging
    map returns exactly the continuous interpolant (all nodal values on
    a face agree, so averaging is the identity on them)."""
    space = femspace.DgSpace(lmesh, k)

    def f(x):
        return np.sin(x[..., 0]) * np.cos(0.5 * x[..., 1])

    # build a DG function whose lattice values match f exactly per cell
    vc0 = postprocess.nodal_average(space.project(f, degree=2 * k + 6))
    vc1 = postprocess.nodal_average(vc0.function)
    assert np.abs(vc1.function.coeffs - vc0.function.coeffs).max() < 1e-11


@pytest.mark.parametrize("name,k", [("odp", 1), ("plaplace4", 2)])
def test_averaged_solution_is_continuous(name, k):
    cfg = make_problem(name, k)
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, k)
    u, _ = minimize(cfg, op)
    vc = postprocess.nodal_average(u, labels=op.labels)
    fb = op.space.face_bundle(2 * k + 1)
    jumps = op.space.face_jumps(vc.function, fb)
    interior = m.face_labels == "I"
    assert np.abs(jumps[interior]).max() < 1e-11
    # zero trace on Dirichlet faces, unconstrained on Neumann faces
    traces, _ = op.space.face_values(vc.function, fb)
    dirich = m.face_labels == "D"
    assert np.abs(traces[dirich]).max() < 1e-11
    neumann = m.face_labels == "N"
    if neumann.any():
        assert np.abs(traces[neumann]).max() > 1e-6


def test_averaging_takes_plain_mean_at_shared_nodes(lmesh):
    m = lmesh
    space = femspace.DgSpace(m, 1)
    rng = np.random.default_rng(11)
    u = femspace.DgFunction(space, rng.standard_normal(space.ndof))
    vc = postprocess.nodal_average(u)

    # pick a vertex that touches no boundary face
    bd = m.face_cells[:, 1] < 0
    on_boundary = np.unique(m.face_vertices[bd])
    vid = int(np.setdiff1d(np.arange(m.num_vertices), on_boundary)[0])
    incident = np.nonzero((m.triangles == vid).any(axis=1))[0]
    assert incident.size >= 3
    point = m.vertices[vid][None, :]
    vals = [space.eval_cellwise(u, np.array([t]), point)[0]
            for t in incident]
    got = space.eval_cellwise(vc.function, np.array([incident[0]]),
                              point)[0]
    assert abs(got - np.mean(vals)) < 1e-12


# -- flux reconstruction --------------------------------------------------

def _poly_dual(op, k, seed=0):
    """A dual-space field interpolated from a random P_k^2 polynomial."""
    rng = np.random.default_rng(seed)
    coef = rng.uniform(-1, 1, size=(2, k + 1, k + 1))

    def q(x):
        out = np.zeros(x.shape[:-1] + (2,))
        for c in range(2):
            for i in range(k + 1):
                for j in range(k + 1 - i):
                    out[..., c] += (coef[c, i, j] * x[..., 0] ** i
                                    * x[..., 1] ** j)
        return out

    return duality.interp_dual(q, op, degree=2 * k + 4), q


@pytest.mark.parametrize("k", [1, 2, 3])
def test_flux_fit_reproduces_polynomials(k, lmesh):
    op = LdgOperator(lmesh, k)
    y, q = _poly_dual(op, k, seed=5)
    sigma = postprocess.rt_fit(y)
    rule = femspace.triangle_quadrature(2 * k + 2)
    phys = (lmesh.vertices[lmesh.triangles[:, 0]][:, None, :]
            + np.einsum("tij,qj->tqi", op.space.jac, rule.points))
    got = sigma.values(phys)
    want = q(phys)
    assert np.abs(got - want).max() < 1e-12 * (1 + np.abs(want).max())


@pytest.mark.parametrize("name,k", [("odp", 2), ("bingham", 1)])
def test_flux_divergence_matches_lifted_divergence(name, k):
    cfg = make_problem(name, k, epsilon=1e-3)
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, k)
    u, _ = minimize(cfg, op)
    y = duality.dual_variable(u, cfg, op)
    sigma = postprocess.rt_fit(y)
    dh = duality.div_reconstruct(y, op)

    rule = femspace.triangle_quadrature(2 * k + 2)
    phys = (m.vertices[m.triangles[:, 0]][:, None, :]
            + np.einsum("tij,qj->tqi", op.space.jac, rule.points))
    vb = op.space.volume_bundle(2 * k + 2)
    want = op.space.cell_values(dh, vb)
    got = sigma.divergence(phys)
    assert np.abs(got - want).max() < 1e-9 * (1 + np.abs(want).max())


def test_flux_normal_trace_continuity():
    cfg = make_problem("plaplace4", 2)
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, 2)
    u, _ = minimize(cfg, op)
    sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))

    t = np.linspace(0.05, 0.95, 4)
    interior = np.nonzero(m.face_labels == "I")[0]
    a = m.vertices[m.face_vertices[interior, 0]]
    b = m.vertices[m.face_vertices[interior, 1]]
    scale = np.abs(sigma.coeffs).max()
    for ti in t:
        pts = a + ti * (b - a)
        plus = sigma.eval_cells(m.face_cells[interior, 0], pts)
        minus = sigma.eval_cells(m.face_cells[interior, 1], pts)
        jump = np.einsum("fc,fc->f", plus - minus,
                         m.face_normals[interior])
        assert np.abs(jump).max() < 1e-10 * (1 + scale)


def test_flux_normal_trace_vanishes_on_neumann():
    cfg = make_problem("plaplace4", 2)
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, 2)
    u, _ = minimize(cfg, op)
    sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))

    neumann = np.nonzero(m.face_labels == "N")[0]
    assert neumann.size > 0
    a = m.vertices[m.face_vertices[neumann, 0]]
    b = m.vertices[m.face_vertices[neumann, 1]]
    scale = np.abs(sigma.coeffs).max()
    for ti in np.linspace(0.1, 0.9, 4):
        pts = a + ti * (b - a)
        vals = sigma.eval_cells(m.face_cells[neumann, 0], pts)
        flux = np.einsum("fc,fc->f", vals, m.face_normals[neumann])
        assert np.abs(flux).max() < 1e-10 * (1 + scale)


def test_divergence_residuals_vanish_at_minimizers(lmesh):
    cfg = make_problem("odp", 2)
    op = LdgOperator(lmesh, 2)
    u, _ = minimize(cfg, op)
    fn = EnergyFunctional(op, cfg)
    sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))
    res = postprocess.divergence_residuals(sigma, fn.fh)
    assert res.shape == (lmesh.num_cells,)
    assert res.max() < 1e-10


# -- error estimator ------------------------------------------------------

@pytest.mark.parametrize("name,k", [("odp", 1), ("plaplace4", 2),
                                    ("bingham", 2)])
def test_estimator_cellwise_sign_and_identity(name, k):
    cfg = make_problem(name, k, epsilon=1e-3)
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, k)
    u, _ = minimize(cfg, op)
    fn = EnergyFunctional(op, cfg)
    vc = postprocess.nodal_average(u, labels=op.labels)
    sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))
    est = postprocess.estimate(vc, sigma, cfg, load_projection=fn.fh)

    assert est.indicators.shape == (m.num_cells,)
    assert est.raw_indicators.min() >= -1e-12 * (1 + est.total)
    assert np.all(est.indicators >= 0)
    assert est.total > 0
    # the total is exactly the conforming primal-dual gap here: the flux
    # is divergence-exact, so the defect integral telescopes
    gap = est.primal_value - est.dual_value
    assert abs(est.total - gap) < 1e-9 * (1 + abs(gap))
    assert abs(est.indicators.sum() - est.total) < 1e-12 * (1 + est.total)


def test_estimator_honors_alternate_density():
    """Regularized solve scored with the unregularized density."""
    cfg = make_problem("bingham", 1, epsilon=1e-3)
    assert cfg.eta_density is not cfg.density
    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    op = LdgOperator(m, 1)
    u, _ = minimize(cfg, op)
    fn = EnergyFunctional(op, cfg)
    vc = postprocess.nodal_average(u, labels=op.labels)
    sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))
    est = postprocess.estimate(vc, sigma, cfg, load_projection=fn.fh)

    # rebuild with the regularized density forced: totals must differ
    alt_cfg = ProblemConfig(density=cfg.density, k=1, boundary=cfg.boundary,
                            load=cfg.load, estimator_density=cfg.density,
                            name="alt")
    alt = postprocess.estimate(vc, sigma, alt_cfg, load_projection=fn.fh)
    assert est.total != pytest.approx(alt.total, rel=1e-6)
    # both remain sign-correct
    assert est.indicators.min() >= 0
    assert alt.indicators.min() >= 0


def test_estimator_decreases_under_refinement():
    cfg = make_problem("odp", 1)
    m = mesh.initial_lshape(cfg.boundary)
    totals = []
    for _ in range(3):
        op = LdgOperator(m, 1)
        u, _ = minimize(cfg, op)
        fn = EnergyFunctional(op, cfg)
        vc = postprocess.nodal_average(u, labels=op.labels)
        sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))
        totals.append(postprocess.estimate(
            vc, sigma, cfg, load_projection=fn.fh).total)
        m = mesh.refine_uniform(m)
    assert totals[0] > totals[1] > totals[2]
    assert totals[1] / totals[2] > 2.0


def test_estimator_upper_bounds_energy_error():
    """eta >= E(v_C) - E(w) for every admissible conforming competitor w.

    The competitor here is the averaged solution from two finer meshes;
    with the constant load the discrete load is exact on every mesh, so
    all three energies refer to the same continuous functional."""
    cfg = ProblemConfig(density=densities.p_laplace(2.0), k=1,
                        boundary=mesh.all_dirichlet(), load=unit_load)

    def conforming_energy(m):
        op = LdgOperator(m, 1)
        u, _ = minimize(cfg, op)
        fn = EnergyFunctional(op, cfg)
        vc = postprocess.nodal_average(u, labels=op.labels)
        sigma = postprocess.rt_fit(duality.dual_variable(u, cfg, op))
        est = postprocess.estimate(vc, sigma, cfg, load_projection=fn.fh)
        # a conforming function has no jumps: the discrete energy of its
        # coefficients is the continuous energy
        assert abs(fn.stabilization(vc.function.coeffs,
                                    vc.function.coeffs)) < 1e-20
        return est

    m = mesh.refine_uniform(mesh.initial_lshape(cfg.boundary))
    coarse = conforming_energy(m)
    for _ in range(2):
        m = mesh.refine_uniform(m)
        fine = conforming_energy(m)
        gap = coarse.primal_value - fine.primal_value
        assert gap > 0
        assert coarse.total >= gap - 1e-12
        # weak duality for the flux against conforming competitors
        assert coarse.dual_value <= fine.primal_value + 1e-12
