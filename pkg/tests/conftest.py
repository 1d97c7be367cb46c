"""Shared fixtures: meshes, benchmark problems, and cached solves."""

import numpy as np
import pytest

from ldgmin import densities, mesh
from ldgmin.ldg_core import ProblemConfig

BINGHAM_MU = 1.0
BINGHAM_G = 0.2
ODP_LAMBDA = 0.0145


def unit_load(x):
    return np.ones(x.shape[:-1])


def make_problem(name: str, k: int, epsilon: float = 1e-5,
                 **overrides) -> ProblemConfig:
    """The three L-shape benchmark problems with their stated parameters."""
    if name == "odp":
        t1 = np.sqrt(2.0 * ODP_LAMBDA * 1.0 / 2.0)
        kwargs = dict(density=densities.optimal_design(1.0, 2.0, t1, 2 * t1),
                      boundary=mesh.all_dirichlet())
    elif name == "plaplace4":
        segments = [((0.0, 0.0), (0.0, -1.0)), ((0.0, 0.0), (1.0, 0.0))]
        kwargs = dict(density=densities.p_laplace(4.0),
                      boundary=mesh.boundary_from_segments(segments,
                                                           "corner-arms"))
    elif name == "bingham":
        boundary = mesh.all_dirichlet()
        warmup = tuple(
            ProblemConfig(
                density=densities.bingham_regularized(BINGHAM_MU, BINGHAM_G,
                                                      e),
                k=k, boundary=boundary, load=unit_load)
            for e in (1e-2, 1e-3, 1e-4) if e > epsilon * (1.0 + 1e-12))
        kwargs = dict(
            density=densities.bingham_regularized(BINGHAM_MU, BINGHAM_G,
                                                  epsilon),
            boundary=boundary, epsilon=epsilon,
            estimator_density=densities.bingham(BINGHAM_MU, BINGHAM_G),
            warmup=warmup)
    else:
        raise ValueError(name)
    kwargs.update(k=k, load=unit_load, name=name)
    kwargs.update(overrides)
    return ProblemConfig(**kwargs)


BENCHMARKS = ("odp", "plaplace4", "bingham")


@pytest.fixture(scope="session")
def lshape_meshes():
    """All-Dirichlet L-shape hierarchy: initial mesh plus 3 uniform."""
    meshes = [mesh.initial_lshape(mesh.all_dirichlet())]
    for _ in range(3):
        meshes.append(mesh.refine_uniform(meshes[-1]))
    return meshes


@pytest.fixture(scope="session")
def benchmark_solves():
    """Criterion-1 grid: every benchmark solved on the initial mesh plus
    3 uniform refinements for k in {1, 2}, with dual variable, conforming
    average, flux fit, and estimator attached.

    Returns a list of dicts keyed by benchmark/k/level.
    """
    from ldgmin import duality, postprocess
    from ldgmin.ldg_core import EnergyFunctional, LdgOperator
    from ldgmin.solver import minimize

    results = []
    for name in BENCHMARKS:
        for k in (1, 2):
            problem = make_problem(name, k)
            m = mesh.initial_lshape(problem.boundary)
            for level in range(4):
                op = LdgOperator(m, k)
                u, report = minimize(problem, op)
                assert report.converged, (
                    f"{name} k={k} level={level}: {report.reason}")
                fn = EnergyFunctional(op, problem)
                y = duality.dual_variable(u, problem, op)
                breakdown = duality.dual_energy(y, problem, op,
                                                load_projection=fn.fh)
                vc = postprocess.nodal_average(u, labels=op.labels)
                flux = postprocess.rt_fit(y)
                est = postprocess.estimate(vc, flux, problem,
                                           load_projection=fn.fh)
                results.append(dict(
                    benchmark=name, k=k, level=level, mesh=m, operator=op,
                    problem=problem, solution=u, report=report,
                    functional=fn, dual=y, breakdown=breakdown,
                    conforming=vc, flux=flux, estimate=est))
                m = mesh.refine_uniform(m)
    return results
