"""Cubic B-spline basis on a shared grid, with exact curvature penalty.

Every state-specific smooth function is represented as ``B @ phi`` where
``B`` is the basis matrix returned by :func:`basis_matrix`.  The roughness
penalty uses ``R[v, w] = integral of b_v'' * b_w''`` over the grid span,
computed exactly: second derivatives of cubic splines are piecewise linear,
so their products are piecewise quadratic and a two-point Gauss-Legendre
rule per knot interval integrates them without error.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import BadK, GridTooSmall, NonIncreasingGrid, OutOfDomain

DEGREE = 3

# Points within this relative distance of the domain ends are clamped onto
# them rather than rejected, so grid endpoints survive round-tripping.
_EDGE_RTOL = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    """Clamped cubic B-spline basis of dimension K on [x[0], x[-1]].

    Attributes
    ----------
    knots : ndarray
        Full knot vector of length K + 4, with 4-fold end knots.
    K : int
        Number of basis functions.
    """

    knots: np.ndarray
    K: int
    _spl: BSpline = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self, "_spl", BSpline(self.knots, np.eye(self.K), DEGREE))

    @property
    def domain(self):
        return self.knots[DEGREE], self.knots[-DEGREE - 1]

    def _clamp(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.domain
        span = hi - lo
        tol = _EDGE_RTOL * max(span, 1.0)
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise OutOfDomain(
                f"points outside basis domain [{lo!r}, {hi!r}]")
        return np.clip(x, lo, hi)


def build_basis(x, K=None):
    """Build a clamped cubic basis with interior knots at quantiles of x.

    Parameters
    ----------
    x : array_like
        Strictly increasing grid, length at least 4.
    K : int, optional
        Basis dimension; defaults to ``min(len(x), 15)``.  Must satisfy
        ``4 <= K <= len(x) + 2``.

    Returns
    -------
    SplineBasis
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise GridTooSmall(f"need at least 4 grid points, got {x.size}")
    if np.any(np.diff(x) <= 0):
        raise NonIncreasingGrid("grid must be strictly increasing")
    n = x.size
    if K is None:
        K = min(n, 15)
    K = int(K)
    if K < 4 or K > n + 2:
        raise BadK(f"K={K} outside [4, n + 2] for n={n}")

    n_interior = K - 4
    if n_interior > 0:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(x, probs)
        # Strictly increasing x makes duplicates impossible in theory; if
        # float quantiles collide anyway, nudge toward the next distinct
        # neighbour's midpoint.
        for m in range(1, n_interior):
            if interior[m] <= interior[m - 1]:
                upper = x[-1] if m == n_interior - 1 else interior[m + 1]
                interior[m] = 0.5 * (interior[m - 1] + upper)
    else:
        interior = np.empty(0)

    knots = np.concatenate([
        np.repeat(x[0], DEGREE + 1), interior, np.repeat(x[-1], DEGREE + 1)])
    return SplineBasis(knots=knots, K=K)


def basis_matrix(basis, x):
    """Evaluate all basis functions at the points x.

    Returns the dense (len(x), K) matrix with entries ``b_v(x_m)``.  Points
    must lie in the closed domain; the right endpoint evaluates as the limit
    from the left.
    """
    pts = basis._clamp(x)
    return BSpline.design_matrix(pts, basis.knots, DEGREE).toarray()


def second_derivative_matrix(basis, x):
    """Evaluate second derivatives ``b_v''(x_m)``, shape (len(x), K)."""
    pts = basis._clamp(x)
    return basis._spl.derivative(2)(pts)


def penalty_matrix(basis):
    """Exact curvature penalty matrix, shape (K, K), symmetric PSD.

    Affine functions have zero curvature, so the matrix has a
    two-dimensional null space spanned by the coefficient vectors that
    reproduce 1 and x.
    """
    t = basis.knots
    d2 = basis._spl.derivative(2)
    R = np.zeros((basis.K, basis.K))
    # Integrand is quadratic on each knot interval: 2-point Gauss-Legendre
    # per interval is exact.
    offset = 0.5 / np.sqrt(3.0)
    for a, b in zip(t[DEGREE:-DEGREE - 1], t[DEGREE + 1:-DEGREE]):
        if b <= a:
            continue
        h = b - a
        mid = 0.5 * (a + b)
        for g in (mid - offset * h, mid + offset * h):
            row = d2(np.array([g]))[0]
            R += (0.5 * h) * np.outer(row, row)
    return R
