"""Latent-state machinery: enumeration, posteriors, and alpha updates.

Three latent models share one interface: "iid" (fixed state probabilities),
"markov" (time-homogeneous chain along the grid), and "covariate"
(multinomial-logistic probabilities driven by per-point covariates, state 1
as reference).

State vectors are enumerated in a canonical order: index m written in base
J, least significant digit first, so the state of the first grid point
cycles fastest.  All posterior work happens in log space; each replicate's
normalizer uses the log-sum-exp shift, which keeps the small-variance
regimes of interest far from overflow.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateLikelihood, EnumerationTooLarge

_OCCUPANCY_EPS = 1e-12


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateEnumeration:
    """All J**n state vectors plus the count tables M-steps need."""

    n: int
    J: int
    states: np.ndarray       # (S, n) int8, 0-based states
    onehot: np.ndarray       # (S, n, J) float64 indicators
    counts: np.ndarray       # (S, J) occurrences of each state
    trans: np.ndarray        # (S, J, J) transition counts n_{s,lj}

    @property
    def size(self):
        return self.states.shape[0]


@lru_cache(maxsize=8)
def enumerate_states(n, J):
    """Build the canonical enumeration for (n, J).  Cached."""
    S = J ** n
    if S > 2 ** 26:
        raise EnumerationTooLarge(f"refusing to materialize {S} vectors")
    idx = np.arange(S)
    states = np.empty((S, n), dtype=np.int8)
    for i in range(n):
        states[:, i] = (idx // J ** i) % J
    onehot = np.zeros((S, n, J))
    np.put_along_axis(onehot, states[:, :, None].astype(int), 1.0, axis=2)
    counts = onehot.sum(axis=1)
    trans = np.einsum("sil,sij->slj", onehot[:, :-1, :], onehot[:, 1:, :])
    return StateEnumeration(n=n, J=J, states=states, onehot=onehot,
                            counts=counts, trans=trans)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

def log_state_probs(beta, v):
    """Multinomial-logistic log probabilities.

    Parameters
    ----------
    beta : (J-1, M+1) coefficients for states 2..J; state 1 is reference
        and carries an implicit zero row.  Column 0 is the intercept.
    v : (..., M) covariate values.

    Returns
    -------
    (..., J) array of log p_j(v).
    """
    v = np.asarray(v, dtype=float)
    eta = beta[:, 0] + v @ beta[:, 1:].T            # (..., J-1)
    eta = np.concatenate([np.zeros(eta.shape[:-1] + (1,)), eta], axis=-1)
    return eta - logsumexp(eta, axis=-1, keepdims=True)


def log_prior_table(enum, latent_spec, params, covariates=None):
    """Log prior of every enumerated state vector.

    Returns shape (S,) for iid/markov, (N, S) for the covariate model.
    Zero-probability entries map to -inf and propagate through sums.
    """
    kind = latent_spec.kind
    with np.errstate(divide="ignore"):
        if kind == "iid":
            return _weighted_logsum(enum.counts, np.log(params.p))
        if kind == "markov":
            out = _weighted_logsum(enum.onehot[:, 0, :], np.log(params.pi))
            out = out + _weighted_logsum(
                enum.trans.reshape(enum.size, -1),
                np.log(params.A).ravel())
            return out
        lp = log_state_probs(params.beta, covariates)   # (N, n, J)
        return np.einsum("sij,kij->ks", enum.onehot,
                         np.maximum(lp, -1e300))


def _weighted_logsum(W, logs):
    """``W @ logs`` where a zero weight kills a -inf log instead of NaN."""
    finite = np.where(np.isneginf(logs), 0.0, logs)
    out = W @ finite
    neg = np.isneginf(logs)
    if np.any(neg):
        out = np.where(W @ neg.astype(float) > 0, -np.inf, out)
    return out


def log_prior_single(states, latent_spec, params, covariate_rows=None):
    """Log prior of one state vector (0-based); used by tests and tools."""
    s = np.asarray(states, dtype=int)
    with np.errstate(divide="ignore"):
        if latent_spec.kind == "iid":
            return float(np.sum(np.log(params.p[s])))
        if latent_spec.kind == "markov":
            val = np.log(params.pi[s[0]])
            val += np.sum(np.log(params.A[s[:-1], s[1:]]))
            return float(val)
        lp = log_state_probs(params.beta, covariate_rows)
        return float(lp[np.arange(s.size), s].sum())


# ---------------------------------------------------------------------------
# posteriors
# ---------------------------------------------------------------------------

def joint_posterior(loglik, logprior):
    """Normalize per-replicate joint posteriors over state vectors.

    Parameters
    ----------
    loglik : (N, S) log density of y_k under each state vector.
    logprior : (S,) or (N, S) log prior table.

    Returns
    -------
    P : (N, S) posterior table, rows summing to one.
    ll : (N,) log marginal likelihood per replicate.
    """
    lw = loglik + (logprior if logprior.ndim == 2 else logprior[None, :])
    m = np.max(lw, axis=1)
    if np.any(~np.isfinite(m)):
        k = int(np.argmin(np.isfinite(m)))
        raise DegenerateLikelihood(
            f"replicate {k + 1}: no state vector has positive likelihood")
    P = np.exp(lw - m[:, None])
    Z = P.sum(axis=1)
    P /= Z[:, None]
    return P, m + np.log(Z)


def marginals_from_joint(P, enum):
    """(N, n, J) pointwise posteriors from the joint table."""
    return np.einsum("ks,sij->kij", P, enum.onehot)


def pairwise_from_joint(P, enum):
    """(N, n-1, J, J) neighbouring-pair posteriors from the joint table."""
    pair = np.einsum("sil,sij->silj", enum.onehot[:, :-1, :],
                     enum.onehot[:, 1:, :])
    return np.einsum("ks,silj->kilj", P, pair)


def marginal_posterior_pointwise(pointwise_loglik, log_pstate):
    """Pointwise Bayes posteriors for independent-state models.

    ``log_pstate`` is (J,) for iid or (N, n, J) for the covariate model.

    Returns (marginals (N, n, J), loglik (N,)).
    """
    lw = pointwise_loglik + log_pstate
    m = np.max(lw, axis=2)
    if np.any(~np.isfinite(m)):
        raise DegenerateLikelihood("a point has zero likelihood everywhere")
    w = np.exp(lw - m[:, :, None])
    Z = w.sum(axis=2)
    return w / Z[:, :, None], (m + np.log(Z)).sum(axis=1)


def forward_backward(pointwise_loglik, pi, A):
    """Scaled forward-backward pass for the Markov latent model.

    Parameters
    ----------
    pointwise_loglik : (N, n, J) per-point emission log densities.
    pi, A : initial distribution and transition matrix.

    Returns
    -------
    marginals : (N, n, J)
    pairwise : (N, n-1, J, J)
    loglik : (N,)
    """
    N, n, J = pointwise_loglik.shape
    shift = pointwise_loglik.max(axis=2)
    if np.any(~np.isfinite(shift)):
        raise DegenerateLikelihood("a point has zero likelihood everywhere")
    E = np.exp(pointwise_loglik - shift[:, :, None])    # scaled emissions

    alpha = np.empty((N, n, J))
    c = np.empty((N, n))
    a = pi[None, :] * E[:, 0, :]
    c[:, 0] = a.sum(axis=1)
    if np.any(c[:, 0] <= 0):
        raise DegenerateLikelihood("zero forward mass at the first point")
    alpha[:, 0, :] = a / c[:, 0, None]
    for i in range(1, n):
        a = (alpha[:, i - 1, :] @ A) * E[:, i, :]
        c[:, i] = a.sum(axis=1)
        if np.any(c[:, i] <= 0):
            raise DegenerateLikelihood(f"zero forward mass at point {i + 1}")
        alpha[:, i, :] = a / c[:, i, None]

    beta = np.empty((N, n, J))
    beta[:, n - 1, :] = 1.0
    for i in range(n - 2, -1, -1):
        beta[:, i, :] = (E[:, i + 1, :] * beta[:, i + 1, :]) @ A.T
        beta[:, i, :] /= c[:, i + 1, None]

    marginals = alpha * beta
    marginals /= marginals.sum(axis=2, keepdims=True)
    pairwise = (alpha[:, :-1, :, None] * A[None, None, :, :]
                * (E * beta)[:, 1:, None, :] / c[:, 1:, None, None])
    loglik = np.log(c).sum(axis=1) + shift.sum(axis=1)
    return marginals, pairwise, loglik


# ---------------------------------------------------------------------------
# alpha updates
# ---------------------------------------------------------------------------

def update_alpha(latent_spec, prev, marginals, pairwise=None,
                 covariates=None, grad_tol=1e-10, max_steps=50,
                 max_halvings=30):
    """Conditional M-step for the latent parameters.

    Returns ``(params, flags)``.  Markov rows with vanishing occupancy keep
    their previous values and are flagged; a covariate Newton search that
    fails to reach the gradient tolerance is flagged "newton_diverged" and
    returns its best iterate.
    """
    from .datamodel import CovariateParams, IIDParams, MarkovParams

    flags = []
    if latent_spec.kind == "iid":
        p = marginals.mean(axis=(0, 1))
        return IIDParams(p=p / p.sum()), flags

    if latent_spec.kind == "markov":
        pi = marginals[:, 0, :].mean(axis=0)
        pi = pi / pi.sum()
        num = pairwise.sum(axis=(0, 1))
        den = marginals[:, :-1, :].sum(axis=(0, 1))
        A = np.array(prev.A, dtype=float, copy=True)
        for l in range(A.shape[0]):
            if den[l] < _OCCUPANCY_EPS:
                flags.append(f"zero_occupancy_row_{l + 1}")
                continue
            A[l] = num[l] / num[l].sum()
        return MarkovParams(pi=pi, A=A), flags

    beta, newton_flags = _newton_beta(
        marginals, covariates, prev.beta, grad_tol, max_steps, max_halvings)
    return CovariateParams(beta=beta), flags + newton_flags


def expected_latent_loglik(latent_spec, params, marginals, pairwise=None,
                           covariates=None):
    """Posterior-expected complete-data log prior, the alpha M-step target."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if latent_spec.kind == "iid":
            lp = np.log(params.p)
            return float(np.sum(marginals.sum(axis=(0, 1))
                                * np.where(np.isfinite(lp), lp, 0.0)))
        if latent_spec.kind == "markov":
            lpi = np.log(params.pi)
            lA = np.log(params.A)
            init = marginals[:, 0, :].sum(axis=0)
            tr = pairwise.sum(axis=(0, 1))
            val = np.sum(init * np.where(np.isfinite(lpi), lpi, 0.0))
            val += np.sum(tr * np.where(np.isfinite(lA), lA, 0.0))
            if (np.any(init[np.isneginf(lpi)] > 0)
                    or np.any(tr[np.isneginf(lA)] > 0)):
                return -np.inf
            return float(val)
    lp = log_state_probs(params.beta, covariates)
    return float(np.sum(marginals * lp))


def _newton_beta(marginals, covariates, beta0, grad_tol, max_steps,
                 max_halvings):
    """Newton-Raphson for the multinomial-logistic alpha M-step.

    Soft targets are the marginal posteriors; observations are all (k, i)
    points pooled.  Steps that do not improve the objective are halved.
    """
    N, n, J = marginals.shape
    M = covariates.shape[2]
    X = np.concatenate(
        [np.ones((N * n, 1)), covariates.reshape(N * n, M)], axis=1)
    Q = marginals.reshape(N * n, J)
    beta = np.array(beta0, dtype=float, copy=True)
    npar = (J - 1) * (M + 1)

    def objective(b):
        lp = log_state_probs(b, X[:, 1:])
        return float(np.sum(Q * lp))

    def grad_hess(b):
        eta = np.concatenate(
            [np.zeros((X.shape[0], 1)), X @ b.T], axis=1)
        mu = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
        G = X.T @ (Q[:, 1:] - mu[:, 1:])                # (M+1, J-1)
        H = np.empty((npar, npar))
        p1 = M + 1
        for j in range(J - 1):
            for l in range(J - 1):
                w = mu[:, j + 1] * ((j == l) - mu[:, l + 1])
                H[j * p1:(j + 1) * p1, l * p1:(l + 1) * p1] = \
                    -(X.T * w) @ X
        return G.T.ravel(), H

    flags = []
    obj = objective(beta)
    for _ in range(max_steps):
        g, H = grad_hess(beta)
        if np.max(np.abs(g)) <= grad_tol:
            return beta, flags
        try:
            step = np.linalg.solve(-H, g).reshape(J - 1, M + 1)
        except np.linalg.LinAlgError:
            flags.append("newton_diverged")
            return beta, flags
        scale = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + scale * step
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-14 * max(1.0, abs(obj)):
                beta, obj = cand, cand_obj
                break
            scale *= 0.5
        else:
            flags.append("newton_diverged")
            return beta, flags
    g, _ = grad_hess(beta)
    if np.max(np.abs(g)) > grad_tol:
        flags.append("newton_diverged")
    return beta, flags
