"""Replicate-wise cross-validation for the smoothing parameters.

Available for the diagonal covariance kinds.  The selection loop
alternates between an ECM fit at the current lambdas and, with the
resulting posterior weights frozen, a per-state grid search of the
leave-one-replicate-out score

    CV_j(lam) = sum_k (y_k - fhat_j^(-k))' W_kj (y_k - fhat_j^(-k)).

The score never refits N times: with f fitted to all replicates and H_kj
the hat matrix of replicate k, the left-out residual satisfies
(I - H_kj)(fhat^(-k) - y_k) = fhat - y_k, so one solve per replicate
recovers each left-out term.  Replicates whose (I - H_kj) is numerically
near-singular (condition estimate above 1e12) fall back to the literal
leave-one-out refit.
"""

from dataclasses import dataclass, field

import numpy as np

from . import em as em_mod

DEFAULT_GRID = np.logspace(-6.0, 2.0, 25)
DEFAULT_LAMBDA0 = 1e-2
COND_MAX = 1e12


@dataclass
class CVConfig:
    """Grid and outer-loop settings for select_lambdas."""

    grid: np.ndarray = field(default_factory=lambda: DEFAULT_GRID.copy())
    lambda0: float = DEFAULT_LAMBDA0
    outer_max_iter: int = 20
    outer_tol: float = 1e-3

    def __post_init__(self):
        self.grid = np.sort(np.asarray(self.grid, dtype=float).ravel())
        if self.grid.size < 1 or np.any(self.grid < 0):
            raise ValueError("grid must hold non-negative values")


def _loo_refit(B, R, lam, weights, y, k):
    """Literal leave-one-replicate-out fit, min-norm when degenerate."""
    keep = np.ones(weights.shape[0], dtype=bool)
    keep[k] = False
    M, rhs = em_mod.diagonal_normal_system(
        B, R, lam, weights[keep], y[keep])
    try:
        phi = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        phi = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return B @ phi


def cv_score(B, R, lam, y, weights, cond_max=COND_MAX):
    """One state's CV score at one lambda, with frozen weights.

    Parameters
    ----------
    B, R : basis and curvature penalty matrices.
    lam : smoothing parameter.
    y : (N, n) responses.
    weights : (N, n) nonnegative frozen weights W_kj (posterior mass over
        noise variance).  Zero-weight points contribute nothing.

    Returns
    -------
    (score, n_fallback) where n_fallback counts replicates computed by the
    literal refit.
    """
    N, n = y.shape
    M, rhs = em_mod.diagonal_normal_system(B, R, lam, weights, y)
    phi = em_mod._solve_spd(M, rhs, "cv fit")
    fhat = B @ phi
    CtB = np.linalg.solve(M, B.T)           # (K, n), shared across k
    score = 0.0
    n_fallback = 0
    eye = np.eye(n)
    for k in range(N):
        wk = weights[k]
        if not np.any(wk > 0):
            continue
        H = B @ (CtB * wk[None, :])
        D = eye - H
        if np.linalg.cond(D) > cond_max:
            n_fallback += 1
            f_loo = _loo_refit(B, R, lam, weights, y, k)
            r = y[k] - f_loo
        else:
            r = -np.linalg.solve(D, fhat - y[k])
        score += float(np.sum(wk * r * r))
    return score, n_fallback


@dataclass
class CVResult:
    lambdas: np.ndarray             # selected, one per state
    scores: np.ndarray              # (J, len(grid)) from the last sweep
    grid: np.ndarray
    n_outer: int
    converged: bool
    n_fallback: int
    fit: object                     # final FitReport at the selection


def select_lambdas(dataset, latent_spec, cov_spec, config=None, K=None,
                   tol=1e-8, max_iter=500, init="quantile-split",
                   compute_se=True):
    """Iterate ECM fits and frozen-weight grid searches until stable.

    Convergence means every state picks the same grid point twice in a
    row, or the relative change of every selected lambda drops below the
    outer tolerance.  Returns a CVResult whose ``fit`` is the final ECM
    fit at the selected lambdas.
    """
    if not cov_spec.diagonal:
        raise ValueError(
            "cross-validation is defined for diagonal covariance kinds")
    config = config or CVConfig()
    J = latent_spec.J
    grid = config.grid
    from .basis import basis_matrix, build_basis, penalty_matrix
    basis = build_basis(dataset.x, K)
    B = basis_matrix(basis, dataset.x)
    R = penalty_matrix(basis)

    if grid.size == 1:
        lambdas = np.full(J, grid[0])
        fit = em_mod.ecm_fit(
            dataset, latent_spec, cov_spec, lambdas=lambdas, K=K, tol=tol,
            max_iter=max_iter, init=init, compute_se=compute_se)
        return CVResult(lambdas=lambdas, scores=np.zeros((J, 1)),
                        grid=grid, n_outer=0, converged=True,
                        n_fallback=0, fit=fit)

    lambdas = np.full(J, config.lambda0)
    picks = np.full(J, -1)
    scores = np.zeros((J, grid.size))
    n_fallback = 0
    converged = False
    n_outer = 0
    fit = None
    for n_outer in range(1, config.outer_max_iter + 1):
        fit = em_mod.ecm_fit(
            dataset, latent_spec, cov_spec, lambdas=lambdas, K=K, tol=tol,
            max_iter=max_iter, init=init, compute_se=False)
        sigma2 = np.broadcast_to(
            np.atleast_1d(np.asarray(fit.theta.cov.sigma2, dtype=float)),
            (J,))
        weights = fit.posteriors / sigma2
        new_picks = np.empty(J, dtype=int)
        for j in range(J):
            for g, lam in enumerate(grid):
                scores[j, g], nf = cv_score(
                    B, R, lam, dataset.y, weights[:, :, j])
                n_fallback += nf
            new_picks[j] = int(np.argmin(scores[j]))
        new_lambdas = grid[new_picks]
        same_points = np.array_equal(new_picks, picks)
        small_change = np.all(
            np.abs(new_lambdas - lambdas)
            <= config.outer_tol * np.maximum(lambdas, 1e-300))
        lambdas, picks = new_lambdas, new_picks
        if same_points or small_change:
            converged = True
            break

    final = em_mod.ecm_fit(
        dataset, latent_spec, cov_spec, lambdas=lambdas, K=K, tol=tol,
        max_iter=max_iter, init=init, compute_se=compute_se)
    return CVResult(lambdas=lambdas, scores=scores.copy(), grid=grid,
                    n_outer=n_outer, converged=converged,
                    n_fallback=n_fallback, fit=final)
