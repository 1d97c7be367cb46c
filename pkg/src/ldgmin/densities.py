"""Energy density bundles (W, DW, D2W, W*) for the benchmark problems.

All densities here are radial, W(a) = w(|a|), with convex w on [0, inf).
The gradient is DW(a) = w'(t) a/t and the (piecewise) Hessian is

    D2W(a) = w''(t) n n^T + (w'(t)/t) (I - n n^T),   n = a/t,

with the convention that evaluation points within 1e-12 of a kink radius use
the branch from below.  Conjugates W*(b) = w*(|b|) are supplied in closed
form where available and by accurate numerical inversion of w' otherwise
(which preserves the Fenchel-Young equality W(a) + W*(DW(a)) = a . DW(a) to
machine precision).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DensityOperationError",
    "EnergyDensity",
    "p_laplace",
    "optimal_design",
    "bingham",
    "bingham_regularized",
]

_KINK_TOL = 1e-12


class DensityOperationError(RuntimeError):
    """Raised when a density operation is unavailable (nonsmooth point)."""


class EnergyDensity:
    """Evaluatable bundle of a convex density and its conjugate.

    Subclasses implement the radial hooks ``_w``, ``_dw``, ``_dw_over_t``,
    ``_d2w`` (all functions of t = |a| >= 0) and ``_wstar`` (function of
    s = |b| >= 0).  ``p`` is the growth exponent used to pick quadrature
    degrees; ``has_derivatives`` is False when DW/D2W are unavailable at
    some points (nonsmooth densities).
    """

    name = "density"
    p = 2.0
    has_derivatives = True

    # radial hooks -------------------------------------------------------
    def _w(self, t):
        raise NotImplementedError

    def _dw(self, t):
        raise NotImplementedError

    def _dw_over_t(self, t):
        raise NotImplementedError

    def _d2w(self, t):
        raise NotImplementedError

    def _wstar(self, s):
        raise NotImplementedError

    # vector interface ---------------------------------------------------
    @staticmethod
    def _norm(a):
        a = np.asarray(a, dtype=float)
        if a.shape[-1:] != (2,):
            raise ValueError("density arguments must have trailing shape (2,)")
        t = np.sqrt(a[..., 0] ** 2 + a[..., 1] ** 2)
        return a, t.shape, np.atleast_1d(t)

    def W(self, a: np.ndarray) -> np.ndarray:
        """Density value; ``a`` has shape (..., 2)."""
        _, shape, t = self._norm(a)
        return np.asarray(self._w(t)).reshape(shape)

    def DW(self, a: np.ndarray) -> np.ndarray:
        """Gradient, shape (..., 2)."""
        a, shape, t = self._norm(a)
        ratio = np.asarray(self._dw_over_t(t)).reshape(shape)
        return ratio[..., None] * a

    def D2W(self, a: np.ndarray) -> np.ndarray:
        """Hessian (defined piecewise / a.e.), shape (..., 2, 2)."""
        a, shape, t = self._norm(a)
        tsafe = np.where(t > 0.0, t, 1.0).reshape(shape)
        n = a / tsafe[..., None]
        nn = n[..., :, None] * n[..., None, :]
        eye = np.eye(2).reshape((1,) * len(shape) + (2, 2))
        radial = np.asarray(self._d2w(t)).reshape(shape)[..., None, None]
        tangential = np.asarray(self._dw_over_t(t)).reshape(shape)
        tangential = tangential[..., None, None]
        out = radial * nn + tangential * (eye - nn)
        # at the origin both coefficients coincide for the densities here
        zero = (t == 0.0).reshape(shape)[..., None, None]
        return np.where(zero, tangential * eye, out)

    def conj(self, b: np.ndarray) -> np.ndarray:
        """Convex conjugate W*(b); ``b`` has shape (..., 2)."""
        _, shape, t = self._norm(b)
        return np.asarray(self._wstar(t)).reshape(shape)


class _PLaplace(EnergyDensity):
    """W(a) = |a|^p / p with conjugate |b|^{p'} / p'."""

    def __init__(self, p: float):
        if not 1.0 < p < np.inf:
            raise ValueError("p-Laplace exponent must satisfy 1 < p < inf")
        self.p = float(p)
        self.q = self.p / (self.p - 1.0)
        self.name = f"p-laplace(p={p:g})"

    def _w(self, t):
        return t ** self.p / self.p

    def _dw(self, t):
        return t ** (self.p - 1.0)

    def _dw_over_t(self, t):
        p = self.p
        if p >= 2.0:
            return t ** (p - 2.0)
        # define the a.e. value 0 at t = 0 (singular point, measure zero)
        tsafe = np.where(t > 0.0, t, 1.0)
        return np.where(t > 0.0, tsafe ** (p - 2.0), 0.0)

    def _d2w(self, t):
        p = self.p
        if p >= 2.0:
            return (p - 1.0) * t ** (p - 2.0)
        tsafe = np.where(t > 0.0, t, 1.0)
        return np.where(t > 0.0, (p - 1.0) * tsafe ** (p - 2.0), 0.0)

    def _wstar(self, s):
        return s ** self.q / self.q


def p_laplace(p: float) -> EnergyDensity:
    """The p-Laplace density |a|^p / p, 1 < p < inf."""
    return _PLaplace(p)


class _OptimalDesign(EnergyDensity):
    """Three-branch radial density of the two-phase optimal design problem.

    w(t) = mu2 t^2/2                                 for t <= t1,
           t1 mu2 (t - t1/2)                         for t1 <= t <= t2,
           mu1 t^2/2 + t1 mu2 (t2 - t1)/2            for t >= t2,

    requiring 0 < t1 < t2 and 0 < mu1 < mu2 with t1 mu2 = mu1 t2 (so the
    slopes match at both breakpoints).  The conjugate is the two-branch
    quadratic w*(s) = s^2/(2 mu2) for s <= mu2 t1 and s^2/(2 mu1) - offset
    for s >= mu2 t1, with offset = t1 mu2 (t2 - t1)/2.
    """

    p = 2.0

    def __init__(self, mu1: float, mu2: float, t1: float, t2: float):
        if not (0.0 < mu1 < mu2):
            raise ValueError("optimal design requires 0 < mu1 < mu2")
        if not (0.0 < t1 < t2):
            raise ValueError("optimal design requires 0 < t1 < t2")
        if abs(t1 * mu2 - mu1 * t2) > 1e-12 * (1.0 + t1 * mu2):
            raise ValueError("optimal design requires t1*mu2 == mu1*t2")
        self.mu1, self.mu2, self.t1, self.t2 = (float(mu1), float(mu2),
                                                float(t1), float(t2))
        self.offset = 0.5 * t1 * mu2 * (t2 - t1)
        self.name = "optimal-design"

    def _branches(self, t):
        tol1 = _KINK_TOL * (1.0 + self.t1)
        tol2 = _KINK_TOL * (1.0 + self.t2)
        low = t <= self.t1 + tol1
        high = ~low & (t > self.t2 + tol2)
        mid = ~low & ~high
        return low, mid, high

    def _w(self, t):
        low, mid, high = self._branches(t)
        out = np.empty_like(t)
        out[low] = 0.5 * self.mu2 * t[low] ** 2
        out[mid] = self.t1 * self.mu2 * (t[mid] - 0.5 * self.t1)
        out[high] = 0.5 * self.mu1 * t[high] ** 2 + self.offset
        return out

    def _dw(self, t):
        low, mid, high = self._branches(t)
        out = np.empty_like(t)
        out[low] = self.mu2 * t[low]
        out[mid] = self.t1 * self.mu2
        out[high] = self.mu1 * t[high]
        return out

    def _dw_over_t(self, t):
        low, mid, high = self._branches(t)
        out = np.empty_like(t)
        out[low] = self.mu2
        tm = np.where(t[mid] > 0.0, t[mid], 1.0)
        out[mid] = self.t1 * self.mu2 / tm
        out[high] = self.mu1
        return out

    def _d2w(self, t):
        low, mid, high = self._branches(t)
        out = np.empty_like(t)
        out[low] = self.mu2
        out[mid] = 0.0
        out[high] = self.mu1
        return out

    def _wstar(self, s):
        sc = self.mu2 * self.t1  # = mu1 * t2, the slope at both kinks
        low = s <= sc + _KINK_TOL * (1.0 + sc)
        out = np.empty_like(s)
        out[low] = 0.5 * s[low] ** 2 / self.mu2
        out[~low] = 0.5 * s[~low] ** 2 / self.mu1 - self.offset
        return out


def optimal_design(mu1: float, mu2: float, t1: float, t2: float) -> EnergyDensity:
    """Two-phase optimal design density with breakpoints t1 < t2."""
    return _OptimalDesign(mu1, mu2, t1, t2)


class _Bingham(EnergyDensity):
    """Nonsmooth Bingham density W(a) = mu |a|^2 / 2 + g |a|.

    The gradient and Hessian are unavailable at a = 0 (requesting them there
    raises :class:`DensityOperationError`); the conjugate is
    W*(b) = 0 for |b| <= g and (|b| - g)^2 / (2 mu) otherwise.
    """

    p = 2.0
    has_derivatives = False

    def __init__(self, mu: float, g: float):
        if mu <= 0.0 or g <= 0.0:
            raise ValueError("bingham requires mu > 0 and g > 0")
        self.mu, self.g = float(mu), float(g)
        self.name = "bingham"

    def _w(self, t):
        return 0.5 * self.mu * t ** 2 + self.g * t

    def _dw(self, t):
        return self.mu * t + self.g

    def _dw_over_t(self, t):
        if np.any(t == 0.0):
            raise DensityOperationError(
                "gradient of the nonsmooth bingham density is undefined at 0;"
                " use bingham_regularized for solving")
        return self.mu + self.g / t

    def _d2w(self, t):
        if np.any(t == 0.0):
            raise DensityOperationError(
                "hessian of the nonsmooth bingham density is undefined at 0;"
                " use bingham_regularized for solving")
        return np.full_like(t, self.mu)

    def _wstar(self, s):
        return np.maximum(s - self.g, 0.0) ** 2 / (2.0 * self.mu)


def bingham(mu: float, g: float) -> EnergyDensity:
    """Nonsmooth Bingham density mu |a|^2/2 + g |a| (W and W* only)."""
    return _Bingham(mu, g)


class _BinghamRegularized(EnergyDensity):
    """Smoothed Bingham density W_eps(a) = mu |a|^2/2 + g sqrt(|a|^2+eps^2).

    The conjugate has no elementary closed form; it is evaluated by inverting
    the strictly increasing, concave derivative w'(t) = mu t + g t/sqrt(t^2 +
    eps^2) with a bracketed Newton iteration, then w*(s) = s t - w(t).  Since
    d/dt [s t - w(t)] vanishes at the maximizer, the inversion error enters
    w* only quadratically, preserving conjugacy identities to ~1e-16.
    """

    p = 2.0

    def __init__(self, mu: float, g: float, eps: float):
        if mu <= 0.0 or g <= 0.0:
            raise ValueError("bingham requires mu > 0 and g > 0")
        if eps < 0.0:
            raise ValueError("regularization eps must be >= 0")
        if eps == 0.0:
            raise ValueError("eps = 0 is the nonsmooth density; use bingham()")
        self.mu, self.g, self.eps = float(mu), float(g), float(eps)
        self.name = f"bingham-regularized(eps={eps:g})"

    def _w(self, t):
        return 0.5 * self.mu * t ** 2 + self.g * np.sqrt(t ** 2 + self.eps ** 2)

    def _rho(self, t):
        return np.sqrt(t ** 2 + self.eps ** 2)

    def _dw(self, t):
        return self.mu * t + self.g * t / self._rho(t)

    def _dw_over_t(self, t):
        return self.mu + self.g / self._rho(t)

    def _d2w(self, t):
        return self.mu + self.g * self.eps ** 2 / self._rho(t) ** 3

    def _invert_dw(self, s):
        """Solve w'(t) = s for t >= 0 (vectorized, safeguarded Newton)."""
        s = np.asarray(s, dtype=float)
        lo = np.maximum((s - self.g) / self.mu, 0.0)
        # w' is concave increasing: Newton from a point with w'(t) <= s
        # converges monotonically from below
        t = lo.copy()
        for _ in range(100):
            f = self._dw(t) - s
            df = self._d2w(t)
            dt = f / df
            t_new = np.maximum(t - dt, 0.0)
            if np.max(np.abs(t_new - t)) <= 1e-16 * (1.0 + np.max(t_new)):
                t = t_new
                break
            t = t_new
        return t

    def _wstar(self, s):
        s = np.asarray(s, dtype=float)
        t = self._invert_dw(s)
        return s * t - self._w(t)


def bingham_regularized(mu: float, g: float, eps: float) -> EnergyDensity:
    """Smoothed Bingham density with regularization parameter eps > 0."""
    return _BinghamRegularized(mu, g, eps)
