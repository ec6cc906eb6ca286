"""Within-replicate covariance models: densities and M-step updates.

Five covariance kinds are supported.  ``iso_diag`` and ``state_diag`` are
diagonal; ``unrestricted`` is a dense SPD matrix; ``homog_ri`` adds a
shared random intercept, V = sigma2 (I + d 11'); ``nonhomog_ri`` (J = 2
only) adds a second intercept acting on the state-2 points of each
replicate, V_s = sigma2 (I + d1 11' + d2 u_s u_s').

Structured kinds never materialize V: quadratic forms and log-determinants
use the rank-one (Sherman-Morrison) or rank-two (Woodbury) identities, so
everything stays O(n) per state vector.

Log-density tables over enumerated state vectors are computed from the
sufficient statistics r'r, 1'r, and u_s'r, which come out of plain matrix
products rather than an (N, S, n) residual tensor.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import NonPositiveSigma, NotSPD

LOG_2PI = float(np.log(2.0 * np.pi))

_MASS_EPS = 1e-12     # posterior mass below this means an empty state
_D_FLOOR = 1e-12      # intercept ratios are clamped to [0, inf)


class CovStructure:
    """A covariance kind plus parameters, with cached decompositions."""

    def __init__(self, kind, params, n):
        self.kind = kind
        self.params = params
        self.n = int(n)
        if kind in ("iso_diag", "homog_ri", "nonhomog_ri"):
            if params.sigma2 <= 0:
                raise NonPositiveSigma(f"sigma2 = {params.sigma2!r}")
        if kind == "state_diag" and np.any(params.sigma2 <= 0):
            raise NonPositiveSigma(f"sigma2 = {params.sigma2!r}")
        if kind == "homog_ri" and 1.0 + n * params.d <= 0:
            raise NotSPD(f"homog_ri with d = {params.d!r} is not SPD")
        if kind == "nonhomog_ri" and (params.d1 < 0 or params.d2 < 0):
            raise NotSPD("nonhomog_ri needs d1, d2 >= 0")
        if kind == "unrestricted":
            V = params.V
            if V.shape != (self.n, self.n):
                raise NotSPD(f"V shape {V.shape}, expected {(n, n)}")
            if not np.allclose(V, V.T, rtol=1e-10, atol=1e-12):
                raise NotSPD("V is not symmetric")
            try:
                self._chol = cho_factor(V, lower=True)
            except np.linalg.LinAlgError as exc:
                raise NotSPD(f"V is not positive definite: {exc}") from None
            self._logdet = 2.0 * np.sum(np.log(np.diag(self._chol[0])))

    @property
    def state_dependent(self):
        return self.kind in ("state_diag", "nonhomog_ri")

    # -- whole-matrix views (state-independent kinds only) ------------------

    def vinv(self):
        """Dense V^{-1}, shape (n, n)."""
        p, n = self.params, self.n
        if self.kind == "iso_diag":
            return np.eye(n) / p.sigma2
        if self.kind == "homog_ri":
            c = p.d / (1.0 + n * p.d)
            return (np.eye(n) - c * np.ones((n, n))) / p.sigma2
        if self.kind == "unrestricted":
            return cho_solve(self._chol, np.eye(n))
        raise ValueError(f"{self.kind} has state-dependent V")

    def logdet(self):
        p, n = self.params, self.n
        if self.kind == "iso_diag":
            return n * np.log(p.sigma2)
        if self.kind == "homog_ri":
            return n * np.log(p.sigma2) + np.log(1.0 + n * p.d)
        if self.kind == "unrestricted":
            return self._logdet
        raise ValueError(f"{self.kind} has state-dependent V")

    def vinv_for_state(self, u):
        """Dense V_s^{-1} for one nonhomog_ri state indicator u."""
        p, n = self.params, self.n
        u = np.asarray(u, dtype=float)
        U = np.column_stack([np.ones(n), u])
        C = np.diag([p.d1, p.d2])
        core = np.linalg.solve(np.eye(2) + (U.T @ U) @ C, U.T)
        return (np.eye(n) - U @ C @ core) / p.sigma2

    # -- log densities -------------------------------------------------------

    def pointwise_loglik(self, y, F):
        """(N, n, J) table of log N(y_ki; F[j, i], sigma_j^2).

        Diagonal kinds only.
        """
        r2 = (y[:, :, None] - F.T[None, :, :]) ** 2
        if self.kind == "iso_diag":
            s2 = np.full(F.shape[0], self.params.sigma2)
        elif self.kind == "state_diag":
            s2 = self.params.sigma2
        else:
            raise ValueError(f"{self.kind} is not diagonal")
        return -0.5 * (r2 / s2 + np.log(s2) + LOG_2PI)

    def loglik_table(self, y, Fs, E2=None):
        """(N, S) table of log N(y_k; Fs[s], V_s).

        Parameters
        ----------
        y : (N, n) responses.
        Fs : (S, n) curve values gathered along each enumerated state
            vector s.
        E2 : (S, n), optional
            State-2 indicators per state vector; required for
            ``nonhomog_ri``.
        """
        p, n = self.params, self.n
        yy = np.einsum("ki,ki->k", y, y)
        ff = np.einsum("si,si->s", Fs, Fs)
        rr = yy[:, None] - 2.0 * (y @ Fs.T) + ff[None, :]
        np.maximum(rr, 0.0, out=rr)
        if self.kind == "iso_diag":
            quad = rr / p.sigma2
            ld = n * np.log(p.sigma2)
        elif self.kind == "unrestricted":
            Vi = self.vinv()
            g1 = np.einsum("ki,ki->k", y @ Vi, y)
            g3 = np.einsum("si,si->s", Fs @ Vi, Fs)
            quad = g1[:, None] - 2.0 * (y @ Vi @ Fs.T) + g3[None, :]
            ld = self._logdet
        elif self.kind == "homog_ri":
            t1 = y.sum(axis=1)[:, None] - Fs.sum(axis=1)[None, :]
            c = p.d / (1.0 + n * p.d)
            quad = (rr - c * t1 ** 2) / p.sigma2
            ld = n * np.log(p.sigma2) + np.log(1.0 + n * p.d)
        elif self.kind == "nonhomog_ri":
            if E2 is None:
                raise ValueError("nonhomog_ri needs state-2 indicators")
            t1 = y.sum(axis=1)[:, None] - Fs.sum(axis=1)[None, :]
            t2 = y @ E2.T - np.einsum("si,si->s", E2, Fs)[None, :]
            m = E2.sum(axis=1)
            det = (1.0 + n * p.d1) * (1.0 + m * p.d2) - m ** 2 * p.d1 * p.d2
            q = (p.d1 * (1.0 + m * p.d2) * t1 ** 2
                 - 2.0 * p.d1 * p.d2 * m * t1 * t2
                 + p.d2 * (1.0 + n * p.d1) * t2 ** 2) / det
            quad = (rr - q) / p.sigma2
            ld = n * np.log(p.sigma2) + np.log(det)[None, :]
        else:
            # state_diag factorizes over points; contract the pointwise
            # table with the caller's state one-hots instead.
            raise ValueError(
                "state_diag tables decompose pointwise; build them from "
                "pointwise_loglik and the enumeration one-hots")
        return -0.5 * (quad + ld + n * LOG_2PI)


def log_mvn_density(cov, r, states=None):
    """log N(r; 0, V_s) for one residual vector.

    ``states`` is the 0-based state vector; it is required for the
    state-dependent kinds (state_diag, nonhomog_ri) and ignored otherwise.
    """
    r = np.asarray(r, dtype=float)
    if cov.kind == "state_diag":
        s2 = cov.params.sigma2[np.asarray(states, dtype=int)]
        return float(-0.5 * np.sum(r ** 2 / s2 + np.log(s2) + LOG_2PI))
    E2 = None
    if cov.kind == "nonhomog_ri":
        E2 = (np.asarray(states, dtype=int) == 1).astype(float)[None, :]
    return float(cov.loglik_table(r[None, :], np.zeros((1, r.size)),
                                  E2=E2)[0, 0])


# ---------------------------------------------------------------------------
# M-step updates from joint posteriors (enumeration path)
# ---------------------------------------------------------------------------

def update_unrestricted(P, y, Fs):
    """Posterior-weighted residual second-moment matrix.

    ``P`` is the (N, S) joint posterior table, ``Fs`` the (S, n) gathered
    curves at the updated coefficients.
    """
    w = P.sum(axis=0)
    PF = P @ Fs
    V = (y.T @ y - y.T @ PF - PF.T @ y + Fs.T @ (w[:, None] * Fs))
    V /= P.shape[0]
    return 0.5 * (V + V.T)


def update_homog_ri(P, y, Fs):
    """Closed-form sigma2 and d for the shared random-intercept model."""
    N, n = y.shape
    yy = np.einsum("ki,ki->k", y, y)
    ff = np.einsum("si,si->s", Fs, Fs)
    rr = yy[:, None] - 2.0 * (y @ Fs.T) + ff[None, :]
    t1 = y.sum(axis=1)[:, None] - Fs.sum(axis=1)[None, :]
    ss_full = float(np.sum(P * rr))
    ss_mean = float(np.sum(P * t1 ** 2))
    sigma2 = (ss_full - ss_mean / n) / (N * (n - 1))
    if sigma2 <= 0:
        raise NonPositiveSigma(f"sigma2 update gave {sigma2!r}")
    d = ss_mean / (sigma2 * N * n ** 2) - 1.0 / n
    return sigma2, max(d, 0.0)


def nonhomog_sufficient_stats(P, y, Fs, E2):
    """Aggregate the statistics the nonhomog_ri objective needs.

    Groups by m = number of state-2 points, since V_s depends on s only
    through m and u_s'r.  Returns (A, counts m, mass W_m, S1, S2, S3)
    where S1/S2/S3 aggregate P * 1'r 1'r, P * 1'r u'r, P * u'r u'r per m.
    """
    yy = np.einsum("ki,ki->k", y, y)
    ff = np.einsum("si,si->s", Fs, Fs)
    rr = yy[:, None] - 2.0 * (y @ Fs.T) + ff[None, :]
    t1 = y.sum(axis=1)[:, None] - Fs.sum(axis=1)[None, :]
    t2 = y @ E2.T - np.einsum("si,si->s", E2, Fs)[None, :]
    m_s = E2.sum(axis=1).astype(int)
    A = float(np.sum(P * rr))
    b2 = (P * t1 ** 2).sum(axis=0)
    bc = (P * t1 * t2).sum(axis=0)
    c2 = (P * t2 ** 2).sum(axis=0)
    w = P.sum(axis=0)
    m_vals = np.arange(m_s.max() + 1)
    S1 = np.bincount(m_s, weights=b2, minlength=m_vals.size)
    S2 = np.bincount(m_s, weights=bc, minlength=m_vals.size)
    S3 = np.bincount(m_s, weights=c2, minlength=m_vals.size)
    W = np.bincount(m_s, weights=w, minlength=m_vals.size)
    return A, m_vals, W, S1, S2, S3


def nonhomog_expected_term(sigma2, d1, d2, n, N, stats):
    """Expected complete-data Gaussian term for nonhomog_ri.

    This is the quantity the conditional M-step maximizes; it equals
    -0.5 sum_k sum_s posterior * (quadratic form + log det V_s + n log 2pi).
    """
    A, m, W, S1, S2, S3 = stats
    det = (1.0 + n * d1) * (1.0 + m * d2) - m ** 2 * d1 * d2
    q = (d1 * (1.0 + m * d2) * S1 - 2.0 * d1 * d2 * m * S2
         + d2 * (1.0 + n * d1) * S3) / det
    quad = (A - q.sum()) / sigma2
    ld = N * n * np.log(sigma2) + float(W @ np.log(det))
    return -0.5 * (quad + ld + N * n * LOG_2PI)


def update_nonhomog_ri(P, y, Fs, E2, prev, max_fev=400, fatol=1e-10):
    """Simplex search for (sigma2, d1, d2), warm-started at ``prev``.

    Runs Nelder-Mead in (log sigma2, log d1, log d2).  The start point is
    a vertex of the initial simplex and the best vertex is never discarded,
    so the returned value cannot be worse than the previous parameters:
    conditional ascent is preserved by construction.

    Returns ``(sigma2, d1, d2, flags)``; flags contains "optimizer_stalled"
    when the evaluation budget ran out before the objective spread fell
    below ``fatol``.
    """
    N, n = y.shape
    stats = nonhomog_sufficient_stats(P, y, Fs, E2)

    def neg(z):
        s2, d1, d2 = np.exp(z)
        return -nonhomog_expected_term(s2, d1, d2, n, N, stats)

    z0 = np.log([max(prev.sigma2, 1e-300),
                 max(prev.d1, _D_FLOOR),
                 max(prev.d2, _D_FLOOR)])
    res = minimize(
        neg, z0, method="Nelder-Mead",
        options={"maxfev": max_fev, "fatol": fatol, "xatol": np.inf,
                 "initial_simplex": _start_simplex(z0)})
    flags = []
    if not res.success:
        flags.append("optimizer_stalled")
    best = res.x if res.fun <= neg(z0) else z0
    sigma2, d1, d2 = np.exp(best)
    if d1 <= _D_FLOOR * 10:
        d1 = 0.0
    if d2 <= _D_FLOOR * 10:
        d2 = 0.0
    return float(sigma2), float(d1), float(d2), flags


def _start_simplex(z0):
    simplex = np.tile(z0, (z0.size + 1, 1))
    for i in range(z0.size):
        simplex[i + 1, i] += 0.25
    return simplex


# ---------------------------------------------------------------------------
# M-step updates from marginal posteriors (diagonal path)
# ---------------------------------------------------------------------------

def update_state_diag(marginals, y, F, prev_sigma2):
    """Per-state variances; empty states keep their previous value.

    Returns (sigma2 array, flags).
    """
    r2 = (y[:, :, None] - F.T[None, :, :]) ** 2
    num = np.einsum("kij,kij->j", marginals, r2)
    den = marginals.sum(axis=(0, 1))
    sigma2 = np.array(prev_sigma2, dtype=float, copy=True)
    flags = []
    for j in range(sigma2.size):
        if den[j] < _MASS_EPS:
            flags.append(f"empty_state_{j + 1}")
            continue
        val = num[j] / den[j]
        if val <= 0:
            raise NonPositiveSigma(
                f"state {j + 1} variance update gave {val!r}")
        sigma2[j] = val
    return sigma2, flags


def update_iso(marginals, y, F):
    """Pooled variance across all states and points."""
    N, n = y.shape
    r2 = (y[:, :, None] - F.T[None, :, :]) ** 2
    sigma2 = float(np.einsum("kij,kij->", marginals, r2) / (N * n))
    if sigma2 <= 0:
        raise NonPositiveSigma(f"iso variance update gave {sigma2!r}")
    return sigma2


def make_structure(cov_spec, params, n):
    return CovStructure(cov_spec.kind, params, n)
