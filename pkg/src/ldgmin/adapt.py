"""Refinement driver: solve, estimate, mark, refine.

:func:`run_loop` repeats the cycle solve -> dual variable -> conforming
average / flux fit -> error indicators -> marking -> refinement until a
level or degrees-of-freedom budget is met, collecting one
:class:`ConvergenceRecord` per level.  Marking uses the bulk criterion
(:func:`doerfler_mark`); refinement is newest-vertex bisection, or
uniform red refinement in ``mode="uniform"``.  Each level after the
first is warm-started by projecting the previous level's conforming
average onto the children cells, which is exact because refinements are
nested.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import duality, postprocess
from .femspace import DgFunction, DgSpace, triangle_quadrature, reference_basis
from .ldg_core import EnergyFunctional, LdgOperator, ProblemConfig
from .mesh import Mesh, initial_lshape, refine, refine_uniform
from .solver import SolveReport, SolverSettings, minimize

__all__ = [
    "AdaptConfig",
    "ConvergenceRecord",
    "LevelState",
    "AdaptiveRunError",
    "doerfler_mark",
    "prolong",
    "run_loop",
]


@dataclass
class AdaptConfig:
    """Stopping and marking parameters for the refinement loop.

    ``levels`` runs a fixed number of levels; ``ndof_budget`` keeps
    refining until a solved level reaches the given number of degrees of
    freedom.  At least one of the two must be set; if both are, the
    first condition hit stops the loop.
    """

    theta: float = 0.5
    mode: str = "adaptive"
    levels: Optional[int] = None
    ndof_budget: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("adaptive", "uniform"):
            raise ValueError(f"unknown refinement mode {self.mode!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("marking fraction theta must be in (0, 1]")
        if self.levels is None and self.ndof_budget is None:
            raise ValueError("set levels and/or ndof_budget")
        if self.levels is not None and self.levels < 1:
            raise ValueError("levels must be at least 1")
        if self.ndof_budget is not None and self.ndof_budget < 1:
            raise ValueError("ndof_budget must be positive")


@dataclass
class ConvergenceRecord:
    """One refinement level's scalar outputs (one CSV row)."""

    level: int
    ndof: int
    hmax: float
    eta: float
    Eh: float
    Ehdual: float
    gap: float
    EvC: float
    EstarRT: float
    iters: int
    seconds: float
    cells: int
    converged: bool = True

    FIELDS = ("level", "ndof", "hmax", "eta", "Eh", "Ehdual", "gap",
              "EvC", "EstarRT", "iters", "seconds", "cells")

    def row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


@dataclass
class LevelState:
    """Everything produced on one level, passed to the observer."""

    level: int
    mesh: Mesh
    operator: LdgOperator
    solution: DgFunction
    solve_report: SolveReport
    dual: duality.DualField
    dual_breakdown: duality.DualEnergyBreakdown
    conforming: postprocess.ConformingFunction
    flux: postprocess.RtFunction
    estimate: postprocess.EstimatorReport
    record: ConvergenceRecord


class AdaptiveRunError(RuntimeError):
    """Raised when a level's solve fails; carries the partial history."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


def doerfler_mark(indicators: np.ndarray, theta: float) -> np.ndarray:
    """Minimal bulk marking: smallest prefix of the sorted indicators.

    Returns the indices of the fewest cells whose indicators sum to at
    least ``theta`` times the total, sorting descending with ties broken
    by cell index.  All-zero indicators mark nothing.
    """
    ind = np.asarray(indicators, dtype=float)
    if ind.ndim != 1:
        raise ValueError("indicators must be a one-dimensional array")
    if not 0.0 < theta <= 1.0:
        raise ValueError("marking fraction theta must be in (0, 1]")
    if np.any(ind < 0.0):
        raise ValueError("indicators must be nonnegative; clip first")
    total = float(ind.sum())
    if total <= 0.0:
        return np.empty(0, dtype=int)
    order = np.argsort(-ind, kind="stable")
    csum = np.cumsum(ind[order])
    n = int(np.searchsorted(csum, theta * total, side="left")) + 1
    n = min(n, len(order))
    marked = order[:n]
    got = float(csum[n - 1])
    if got < theta * total - 1e-12 * total:
        raise AssertionError("bulk criterion violated by marking")
    if n > 1 and float(csum[n - 2]) >= theta * total:
        raise AssertionError("marking is not minimal")
    return marked


def prolong(v: DgFunction, fine_mesh: Mesh, space: DgSpace | None = None
            ) -> DgFunction:
    """Carry a field to the next refinement of its mesh, exactly.

    Children are nested in their parents, so evaluating the coarse
    polynomial at each child's quadrature points and projecting is an
    identity on the function.  ``fine_mesh.parent`` must point into the
    mesh ``v`` lives on.
    """
    coarse = v.space
    k = coarse.k
    if space is None:
        space = DgSpace(fine_mesh, k)
    parent = fine_mesh.parent
    if parent.min() < 0 or parent.max() >= coarse.num_cells:
        raise ValueError("fine mesh does not refine the coarse mesh")
    rule = triangle_quadrature(2 * k)
    psi = reference_basis(k, rule.points)
    p0 = fine_mesh.vertices[fine_mesh.triangles[:, 0]]
    phys = (p0[:, None, :]
            + np.einsum("tab,qb->tqa", space.jac, rule.points))
    nq = rule.points.shape[0]
    vals = coarse.eval_cellwise(
        v, np.repeat(parent, nq), phys.reshape(-1, 2)).reshape(-1, nq)
    coeffs = space.scale[:, None] * np.einsum(
        "q,mq,tq->tm", rule.weights, psi, vals)
    return DgFunction(space, coeffs)


def run_loop(problem: ProblemConfig, adapt: AdaptConfig,
             mesh: Mesh | None = None,
             observer: Optional[Callable[[LevelState], None]] = None,
             settings: SolverSettings | None = None
             ) -> list[ConvergenceRecord]:
    """Run the full solve/estimate/mark/refine cycle.

    Returns the per-level records; the optional ``observer`` is called
    with the complete :class:`LevelState` after each level, before the
    mesh is refined.  A failed solve raises :class:`AdaptiveRunError`
    carrying the records of the levels that did complete.
    """
    if mesh is None:
        mesh = initial_lshape(problem.boundary)
    records: list[ConvergenceRecord] = []
    init = None
    level = 0
    while True:
        op = LdgOperator(mesh, problem.k)
        u, report = minimize(problem, op, init=init, settings=settings)
        retried_iterations = 0
        if not report.converged and init is not None:
            # the warm start can strand Newton in a stiff region (notably
            # under strong regularization); fall back to a cold start,
            # which re-engages the continuation chain
            retried_iterations = report.iterations
            u, report = minimize(problem, op, settings=settings)
        fn = EnergyFunctional(op, problem)
        y = duality.dual_variable(u, problem, op)
        breakdown = duality.dual_energy(y, problem, op,
                                        load_projection=fn.fh)
        vc = postprocess.nodal_average(u, labels=op.labels)
        flux = postprocess.rt_fit(y)
        est = postprocess.estimate(vc, flux, problem,
                                   load_projection=fn.fh)
        record = ConvergenceRecord(
            level=level,
            ndof=op.space.ndof,
            hmax=float(mesh.cell_h.max()),
            eta=est.total,
            Eh=report.energy,
            Ehdual=breakdown.total,
            gap=report.energy - breakdown.total,
            EvC=est.primal_value,
            EstarRT=est.dual_value,
            iters=(report.iterations + report.warmup_iterations
                   + retried_iterations),
            seconds=report.wall_time,
            cells=mesh.num_cells,
            converged=report.converged,
        )
        records.append(record)
        if observer is not None:
            observer(LevelState(level, mesh, op, u, report, y, breakdown,
                                vc, flux, est, record))
        if not report.converged:
            raise AdaptiveRunError(
                f"solve did not converge on level {level} "
                f"({report.reason}, |g| = {report.gradient_norm:.3e})",
                records)
        if adapt.levels is not None and level + 1 >= adapt.levels:
            break
        if (adapt.ndof_budget is not None
                and op.space.ndof >= adapt.ndof_budget):
            break

        if adapt.mode == "uniform":
            fine = refine_uniform(mesh)
        else:
            marked = doerfler_mark(est.indicators, adapt.theta)
            fine = (refine(mesh, marked) if marked.size
                    else refine_uniform(mesh))
        init = prolong(vc.function, fine).coeffs
        mesh = fine
        level += 1
    return records
