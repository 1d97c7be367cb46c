"""Damped Newton minimization of the discrete energy.

Exact assembled Hessians, a sparse LU factorization, an Armijo backtracking
line search, and a diagonal Levenberg shift that engages only when the
Hessian is singular/indefinite or fails to produce a descent direction
(e.g. the 4-Laplace Hessian vanishes at the zero start iterate).  The
iteration is fully deterministic: no randomization, single-threaded sparse
factorizations, and tolerances that do not depend on wall-clock state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .femspace import DgFunction
from .ldg_core import EnergyFunctional, LdgOperator, ProblemConfig

__all__ = ["SolverSettings", "SolveReport", "minimize"]


@dataclass
class SolverSettings:
    """Newton solver controls.

    The three 1e-15 tolerances are aspirational targets; the practical
    stopping rule is the gradient floor: once the max-norm of the gradient
    stalls below ``floor_factor * (1 + ||f_h||_inf)`` no further digits are
    obtainable in double precision and the iteration reports convergence.
    """

    max_iterations: int = 1000
    gradient_tolerance: float = 1e-15
    step_tolerance: float = 1e-15
    function_tolerance: float = 1e-15
    hessian_shift: float = 1e-10
    shift_growth: float = 16.0
    max_shift: float = 1e16
    armijo_constant: float = 1e-4
    max_backtracks: int = 100
    floor_factor: float = 1e-11
    stall_patience: int = 30

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.stall_patience < 1:
            raise ValueError("stall_patience must be >= 1")
        for name in ("gradient_tolerance", "step_tolerance",
                     "function_tolerance", "hessian_shift", "shift_growth",
                     "max_shift", "armijo_constant", "floor_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_backtracks < 1:
            raise ValueError("max_backtracks must be >= 1")
        if self.armijo_constant >= 0.5:
            raise ValueError("armijo_constant must be below 1/2 or full "
                             "Newton steps near the solution get rejected")
        if self.shift_growth <= 1.0:
            raise ValueError("shift_growth must exceed 1")


@dataclass
class SolveReport:
    """Outcome of one Newton solve."""

    iterations: int
    gradient_norm: float
    energy: float
    converged: bool
    reason: str
    wall_time: float
    newton_shifts: int = 0
    warmup_iterations: int = 0


def _newton_direction(H, g, lam: float):
    """Solve (H + lam I) d = -g; returns None on factorization failure.

    One step of iterative refinement follows the LU solve so that the
    direction stays accurate even when the Hessian is badly conditioned
    (degenerate densities make cond(H) ~ 1e8 near flat regions).
    """
    A = H if lam == 0.0 else (H + lam * sp.identity(H.shape[0],
                                                    format="csr"))
    try:
        factor = splu(A.tocsc())
        with np.errstate(all="ignore"):
            d = factor.solve(-g)
            if not np.all(np.isfinite(d)):
                return None
            for _ in range(2):
                r = A @ d + g
                d = d - factor.solve(r)
    except (RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(d)):
        return None
    return d


def minimize(cfg: ProblemConfig, G: LdgOperator, init=None,
             settings: SolverSettings | None = None):
    """Minimize the discrete energy; returns (DgFunction, SolveReport).

    ``init`` is an optional warm start (DgFunction or coefficient array);
    the default start is zero.
    """
    settings = settings or SolverSettings()
    t_start = time.perf_counter()
    space = G.space
    warmup_iterations = 0
    if init is None and cfg.warmup:
        # continuation: minimize the warmup chain, each solution feeding
        # the next, and use the last one as the starting point
        for wcfg in cfg.warmup:
            u_w, rep_w = minimize(wcfg, G, init=init, settings=settings)
            warmup_iterations += rep_w.iterations + rep_w.warmup_iterations
            init = u_w
    fn = EnergyFunctional(G, cfg)
    if init is None:
        x = np.zeros(space.ndof)
    elif isinstance(init, DgFunction):
        x = init.coeffs.copy()
    else:
        x = np.array(init, dtype=float).ravel()
        if x.size != space.ndof:
            raise ValueError("initial iterate has the wrong size")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial iterate contains non-finite entries")

    E = fn.value(x)
    g = fn.gradient(x)
    floor = settings.floor_factor * (1.0 + float(np.max(np.abs(fn.F))))
    noise = 16.0 * np.finfo(float).eps
    prev_gmax = np.inf
    best_gmax = np.inf
    stalled = 0
    pending_small = False
    shifts_used = 0
    converged = False
    reason = "max_iterations"
    iterations = 0

    for iterations in range(1, settings.max_iterations + 1):
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if gmax <= settings.gradient_tolerance:
            converged, reason = True, "gradient_tolerance"
            break
        if pending_small and gmax <= 30.0 * floor:
            converged, reason = True, "step_tolerance"
            break
        if gmax <= floor and gmax >= 0.5 * prev_gmax:
            # negligible residual that no longer improves: double-precision
            # floor of the assembled gradient
            converged, reason = True, "gradient_floor"
            break
        if gmax >= 0.9 * best_gmax:
            stalled += 1
            if stalled >= settings.stall_patience:
                # the iteration no longer makes progress in exact arithmetic
                # terms; accept only a residual within a small multiple of
                # the double-precision floor
                converged = best_gmax <= 100.0 * floor
                reason = "stalled"
                break
        else:
            stalled = 0
        best_gmax = min(best_gmax, gmax)
        pending_small = False

        H = fn.hessian(x)
        lam = 0.0
        accepted = False
        while True:
            d = _newton_direction(H, g, lam)
            slope = float(g @ d) if d is not None else np.inf
            if d is not None and slope < 0.0:
                # Armijo backtracking with a roundoff cushion: near the
                # minimizer the true decrease falls below the resolution of
                # E itself and must not cause spurious rejections
                cushion = noise * (1.0 + abs(E))
                t = 1.0
                for _ in range(settings.max_backtracks):
                    E_new = fn.value(x + t * d, on_overflow="inf")
                    if E_new <= E + settings.armijo_constant * t * slope \
                            + cushion:
                        accepted = True
                        break
                    t *= 0.5
                if accepted:
                    break
            # escalate the diagonal shift and retry
            lam = settings.hessian_shift if lam == 0.0 \
                else lam * settings.shift_growth
            shifts_used += 1
            if lam > settings.max_shift:
                break
        if not accepted:
            reason = "no_descent_direction"
            break

        step = t * d
        x = x + step
        E_prev = E
        E = fn.value(x)
        g = fn.gradient(x)
        prev_gmax = gmax
        small_step = float(np.max(np.abs(step))) <= \
            settings.step_tolerance * (1.0 + float(np.max(np.abs(x))))
        small_fun = abs(E_prev - E) <= \
            settings.function_tolerance * (1.0 + abs(E))
        pending_small = small_step or small_fun

    gmax = float(np.max(np.abs(g))) if g.size else 0.0
    report = SolveReport(
        iterations=iterations,
        gradient_norm=gmax,
        energy=E,
        converged=converged,
        reason=reason,
        wall_time=time.perf_counter() - t_start,
        newton_shifts=shifts_used,
        warmup_iterations=warmup_iterations,
    )
    return DgFunction(space, x), report
