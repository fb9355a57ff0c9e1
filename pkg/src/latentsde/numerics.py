"""Shared numerical utilities: time grids, quadrature, guarded linear algebra.

Everything in this module is deterministic and side-effect free.  The rest
of the package funnels its solves of symmetric positive (semi-)definite
systems through :func:`psd_solve` / :class:`CholeskyFactor` so that jitter
policy lives in exactly one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidArgumentError, NumericalError

__all__ = [
    "TimeGrid",
    "Quadrature",
    "gauss_legendre",
    "trapezoid_weights",
    "interp_linear",
    "psd_solve",
    "CholeskyFactor",
    "sym",
    "floor_psd",
]

#: Relative jitter (times the mean diagonal) used on the first retry after a
#: failed Cholesky factorization; escalated tenfold on each further retry.
DEFAULT_JITTER_REL = 1e-8

#: Number of tenfold jitter escalations attempted before giving up.
MAX_JITTER_ESCALATIONS = 3


@dataclass(frozen=True)
class TimeGrid:
    """Uniform inference grid on ``[t0, t_end]``.

    The step count ``steps`` is ``(t_end - t0) / dt`` rounded to the nearest
    integer and ``t_end`` is snapped so the grid is exactly uniform.  The
    grid has ``steps + 1`` points ``t0, t0 + dt, ..., t_end``.
    """

    t0: float
    t_end: float
    dt: float
    steps: int = field(init=False)

    def __post_init__(self):
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        if self.t_end <= self.t0:
            raise InvalidArgumentError(
                f"empty span: t_end={self.t_end} <= t0={self.t0}"
            )
        steps = int(round((self.t_end - self.t0) / self.dt))
        if steps < 1:
            raise InvalidArgumentError(
                f"span {self.t_end - self.t0} shorter than one step dt={self.dt}"
            )
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "t_end", self.t0 + steps * self.dt)

    @property
    def n_points(self) -> int:
        return self.steps + 1

    @property
    def span(self) -> float:
        return self.t_end - self.t0

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    def nearest_index(self, t) -> np.ndarray:
        """Snap times to the nearest grid index (clipped to the grid)."""
        idx = np.rint((np.asarray(t, dtype=float) - self.t0) / self.dt).astype(int)
        return np.clip(idx, 0, self.steps)


@dataclass(frozen=True)
class Quadrature:
    """Nodes and weights for integration over a fixed interval ``[a, b]``.

    Invariant: ``weights.sum() == b - a`` up to rounding, nodes lie inside
    the closed interval and are strictly increasing.
    """

    a: float
    b: float
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Contract node values (first axis = node) against the weights."""
        values = np.asarray(values)
        return np.tensordot(self.weights, values, axes=(0, 0))


def gauss_legendre(a: float, b: float, n: int) -> Quadrature:
    """Gauss-Legendre rule with ``n`` nodes mapped onto ``[a, b]``.

    Exact for polynomials up to degree ``2n - 1``.  For ``n = 1`` this is
    the midpoint rule with weight ``b - a``.
    """
    if n < 1:
        raise InvalidArgumentError(f"need at least one node, got n={n}")
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise InvalidArgumentError(f"bad interval [{a}, {b}]")
    x, w = leggauss(n)
    half = 0.5 * (b - a)
    return Quadrature(a=a, b=b, nodes=0.5 * (a + b) + half * x, weights=half * w)


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    """Trapezoid quadrature weights for the grid points of ``grid``.

    These weights (``dt/2`` at the ends, ``dt`` inside) define the single
    time-integration rule used for every path integral in the package, so
    that closed-form parameter updates are exactly stationary with respect
    to the same discretized objective they were derived from.
    """
    w = np.full(grid.n_points, grid.dt)
    w[0] = 0.5 * grid.dt
    w[-1] = 0.5 * grid.dt
    return w


def interp_linear(grid: TimeGrid, values: np.ndarray, t) -> np.ndarray:
    """Linearly interpolate grid-sampled values at times ``t``.

    ``values`` has shape ``(n_points, ...)``; anything after the first axis
    is interpolated componentwise.  Times outside ``[t0, t_end]`` (beyond a
    half-ulp tolerance) raise :class:`InvalidArgumentError`.
    """
    values = np.asarray(values)
    if values.shape[0] != grid.n_points:
        raise InvalidArgumentError(
            f"values first axis {values.shape[0]} != grid points {grid.n_points}"
        )
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    tq = np.atleast_1d(t)
    tol = 1e-9 * max(1.0, abs(grid.t_end))
    if np.any(tq < grid.t0 - tol) or np.any(tq > grid.t_end + tol):
        raise InvalidArgumentError("interpolation time outside the grid span")
    u = np.clip((tq - grid.t0) / grid.dt, 0.0, float(grid.steps))
    lo = np.minimum(u.astype(int), grid.steps - 1)
    frac = u - lo
    out = (1.0 - frac).reshape((-1,) + (1,) * (values.ndim - 1)) * values[lo]
    out += frac.reshape((-1,) + (1,) * (values.ndim - 1)) * values[lo + 1]
    return out[0] if scalar else out


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part ``(a + a.T) / 2`` over the last two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def floor_psd(a: np.ndarray, floor: float = 0.0, tol: float = -1e-10) -> np.ndarray:
    """Clip eigenvalues of a symmetric matrix from below.

    Returns ``a`` unchanged when the smallest eigenvalue is ``>= tol``
    (cheap common case avoided via a Cholesky probe for small matrices).
    """
    a = sym(np.asarray(a, dtype=float))
    try:
        np.linalg.cholesky(a + max(-tol, 0.0) * np.eye(a.shape[-1]))
        return a
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(a)
    if w.min() >= tol:
        return a
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def _jitter_ladder(mat: np.ndarray, jitter: float | None):
    """Sequence of diagonal jitters to attempt, in order.

    A caller-supplied positive jitter is applied as-is on the first attempt;
    otherwise the first attempt is unperturbed and the fallback starts at
    ``1e-8`` times the mean diagonal.  Either way the last resort is three
    tenfold escalations.
    """
    if jitter is not None and jitter > 0.0:
        ladder = [float(jitter)]
    else:
        scale = float(np.mean(np.diag(mat))) if mat.size else 1.0
        if not np.isfinite(scale) or scale <= 0.0:
            scale = 1.0
        ladder = [0.0, DEFAULT_JITTER_REL * scale]
    for _ in range(MAX_JITTER_ESCALATIONS):
        ladder.append(10.0 * ladder[-1])
    return ladder


class CholeskyFactor:
    """Cached Cholesky factorization of a symmetric PSD matrix with jitter.

    The factorization is attempted first with the caller-supplied jitter
    (default: none), then with ``1e-8`` times the mean diagonal, escalating
    tenfold up to three times before raising :class:`NumericalError`.
    """

    def __init__(self, mat: np.ndarray, jitter: float | None = None):
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise InvalidArgumentError(f"expected a square matrix, got {mat.shape}")
        asym = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
        scale = max(1.0, float(np.max(np.abs(mat)))) if mat.size else 1.0
        if asym > 1e-8 * scale:
            raise InvalidArgumentError(
                f"matrix is not symmetric (max asymmetry {asym:.3e})"
            )
        mat = sym(mat)
        self.mat = mat
        last = 0.0
        for j in _jitter_ladder(mat, jitter):
            last = j
            try:
                self._cf = cho_factor(
                    mat + j * np.eye(mat.shape[0]) if j else mat, lower=True
                )
                self.jitter = j
                return
            except np.linalg.LinAlgError:
                continue
        raise NumericalError(
            f"Cholesky failed up to jitter {last:.3e}", attempted_jitter=last
        )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        vector = rhs.ndim == 1
        out = cho_solve(self._cf, rhs if not vector else rhs[:, None])
        return out[:, 0] if vector else out

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._cf[0]))))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.mat.shape[0]))


def psd_solve(mat: np.ndarray, rhs: np.ndarray, jitter: float | None = None) -> np.ndarray:
    """Solve ``mat @ x = rhs`` for symmetric PSD ``mat`` with jitter fallback.

    Parameters
    ----------
    mat : (n, n) array
        Symmetric positive semi-definite matrix.
    rhs : (n,) or (n, m) array
        Right-hand side.
    jitter : float, optional
        Initial diagonal jitter.  When omitted (or zero) the plain system is
        tried first and jitter kicks in only on factorization failure, so
        well-conditioned solves are not perturbed at all.

    Raises
    ------
    NumericalError
        If factorization still fails after three tenfold escalations.
    """
    return CholeskyFactor(mat, jitter=jitter).solve(rhs)
