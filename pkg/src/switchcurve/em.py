"""Penalized ECM fitting of the switching-curve model.

One iteration runs, in order: the E-step (posterior state tables at the
current parameters), the coefficient update with the covariance held at its
current value, the covariance update at the new coefficients, and the
latent-parameter update.  Each conditional step increases the penalized
observed-data objective

    sum_k log p(y_k | theta) - sum_j lambda_j phi_j' R phi_j,

and the trace of that objective is checked for monotone ascent every
iteration.

Two E-step routes exist.  Diagonal covariance kinds factorize over grid
points, so posteriors come from pointwise Bayes rules (independent-state
models) or a forward-backward pass (Markov).  The structured kinds need the
joint posterior over all J**n state vectors; those tables are built from
matrix products against the cached enumeration, never from explicit loops
over state vectors.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import covariance as cov_mod
from . import latent as lat_mod
from .basis import basis_matrix, build_basis, penalty_matrix
from .datamodel import (
    CovariateParams,
    FitReport,
    HomogRIParams,
    IIDParams,
    IsoDiagParams,
    MarkovParams,
    NonHomogRIParams,
    StateDiagParams,
    Theta,
    UnrestrictedParams,
    theta_from_dict,
    validate,
)
from .errors import (
    BadInit,
    MonotonicityViolation,
    SingularSystem,
)

log = logging.getLogger(__name__)

_RIDGE_SCALE = 1e-10
_ASCENT_RTOL = 1e-8
_ALPHA_FLOOR = 0.05


@dataclass
class EStep:
    """Posterior tables and the log-likelihood at the evaluated theta."""

    marginals: np.ndarray            # (N, n, J)
    loglik: np.ndarray               # (N,)
    pairwise: np.ndarray | None = None   # (N, n-1, J, J), Markov only
    joint: np.ndarray | None = None      # (N, S), enumeration route only


def weight_matrices(marginals, sigma2):
    """Diagonal-path working weights, posterior mass over noise variance.

    ``sigma2`` is scalar (iso) or per-state (J,).  Returns (N, n, J).
    """
    return marginals / np.asarray(sigma2, dtype=float)


def gather_curves(F, states):
    """Rows of f_s(x): F (J, n) gathered along each state vector."""
    return F[states.astype(int), np.arange(F.shape[1])[None, :]]


def classify_marginals(marginals, tie_tol=1e-12):
    """Argmax states (0-based) with ties broken toward the lower index.

    Returns ``(labels, tie_mask)``.
    """
    labels = np.argmax(marginals, axis=2)
    top = np.max(marginals, axis=2)
    tie = (np.abs(marginals - top[:, :, None]) <= tie_tol).sum(axis=2) > 1
    return labels, tie


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _use_enumeration(cov_spec, force):
    return force or not cov_spec.diagonal


def e_step(dataset, F, theta, latent_spec, cov_spec, enum=None,
           force_enumeration=False, want_joint=False):
    """Posterior tables at the given curve values F (J, n) and theta."""
    y = dataset.y
    cov = cov_mod.make_structure(cov_spec, theta.cov, dataset.n_points)
    if _use_enumeration(cov_spec, force_enumeration):
        if cov_spec.kind == "state_diag":
            pw = cov.pointwise_loglik(y, F)
            table = np.einsum("kij,sij->ks", pw, enum.onehot)
        elif cov_spec.kind == "iso_diag":
            table = cov.loglik_table(y, gather_curves(F, enum.states))
        else:
            Fs = gather_curves(F, enum.states)
            E2 = enum.onehot[:, :, 1] if cov_spec.kind == "nonhomog_ri" \
                else None
            table = cov.loglik_table(y, Fs, E2=E2)
        prior = lat_mod.log_prior_table(
            enum, latent_spec, theta.latent, covariates=dataset.covariates)
        P, ll = lat_mod.joint_posterior(table, prior)
        marg = lat_mod.marginals_from_joint(P, enum)
        pair = (lat_mod.pairwise_from_joint(P, enum)
                if latent_spec.kind == "markov" else None)
        return EStep(marginals=marg, loglik=ll, pairwise=pair, joint=P)

    pw = cov.pointwise_loglik(y, F)
    if latent_spec.kind == "markov":
        marg, pair, ll = lat_mod.forward_backward(
            pw, theta.latent.pi, theta.latent.A)
        return EStep(marginals=marg, loglik=ll, pairwise=pair)
    if latent_spec.kind == "covariate":
        lp = lat_mod.log_state_probs(theta.latent.beta, dataset.covariates)
    else:
        with np.errstate(divide="ignore"):
            lp = np.log(theta.latent.p)
    marg, ll = lat_mod.marginal_posterior_pointwise(pw, lp)
    return EStep(marginals=marg, loglik=ll)


def penalty_value(theta, R):
    return float(sum(
        lam * phi @ R @ phi
        for lam, phi in zip(theta.lambdas, theta.phi)))


def observed_objective(dataset, B, R, theta, latent_spec, cov_spec,
                       enum=None, force_enumeration=False):
    """Penalized observed-data objective at theta."""
    F = theta.phi @ B.T
    step = e_step(dataset, F, theta, latent_spec, cov_spec, enum=enum,
                  force_enumeration=force_enumeration)
    return float(step.loglik.sum()) - penalty_value(theta, R)


# ---------------------------------------------------------------------------
# coefficient updates
# ---------------------------------------------------------------------------

def _solve_spd(A, b, what):
    """Cholesky solve with a trace-scaled ridge retry."""
    try:
        return cho_solve(cho_factor(A, lower=True), b)
    except np.linalg.LinAlgError:
        ridge = _RIDGE_SCALE * np.trace(A) / A.shape[0]
        log.warning("%s: singular normal matrix, retrying with ridge %.3e",
                    what, ridge)
        try:
            return cho_solve(
                cho_factor(A + ridge * np.eye(A.shape[0]), lower=True), b)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"{what}: {exc}") from None


def diagonal_normal_system(B, R, lam, weights, y):
    """Normal equations for one state's weighted penalized spline.

    ``weights`` is (N, n) nonnegative; returns (M, rhs) with
    M = B' diag(sum_k w_k) B + 2 lam R and rhs = B' sum_k w_k y_k.
    """
    wsum = weights.sum(axis=0)
    M = B.T @ (wsum[:, None] * B) + 2.0 * lam * R
    rhs = B.T @ (weights * y).sum(axis=0)
    return M, rhs


def update_f_diagonal(B, R, lambdas, y, marginals, sigma2):
    """Per-state coefficient updates for diagonal covariance kinds."""
    J = marginals.shape[2]
    W = weight_matrices(marginals, sigma2)
    phi = np.empty((J, B.shape[1]))
    for j in range(J):
        M, rhs = diagonal_normal_system(B, R, lambdas[j], W[:, :, j], y)
        phi[j] = _solve_spd(M, rhs, f"coefficient update, state {j + 1}")
    return phi


def smoother_matrix(B, R, lam, weights_all, weights_k):
    """Replicate k's hat matrix mapping y_k into the shared fit.

    ``weights_all`` is the (n,) column sum of every replicate's weights;
    ``weights_k`` the (n,) weights of replicate k.
    """
    M = B.T @ (weights_all[:, None] * B) + 2.0 * lam * R
    return B @ np.linalg.solve(M, B.T * weights_k[None, :])


def general_normal_system(B, R, lambdas, y, cov, enum, P):
    """Stacked JK x JK normal equations for the joint coefficient update.

    Valid for any covariance structure; state-dependent kinds take the
    slower per-state-vector route.
    """
    n, K = B.shape
    J = enum.J
    JK = J * K
    w = P.sum(axis=0)
    ytil = P.T @ y                                      # (S, n)
    A = np.zeros((JK, JK))
    b = np.zeros(JK)

    if cov.kind == "state_diag":
        marg = lat_mod.marginals_from_joint(P, enum)
        W = weight_matrices(marg, cov.params.sigma2)
        for j in range(J):
            M, rhs = diagonal_normal_system(
                B, R, 0.0, W[:, :, j], y)
            A[j * K:(j + 1) * K, j * K:(j + 1) * K] = M
            b[j * K:(j + 1) * K] = rhs
    elif cov.kind == "nonhomog_ri":
        for s in range(enum.size):
            Vi = cov.vinv_for_state(enum.onehot[s, :, 1])
            ind = enum.onehot[s]                        # (n, J)
            Bw = [B * ind[:, j][:, None] for j in range(J)]
            for j in range(J):
                ViBj = Vi @ Bw[j]
                for l in range(J):
                    A[j * K:(j + 1) * K, l * K:(l + 1) * K] += \
                        w[s] * (ViBj.T @ Bw[l])
                b[j * K:(j + 1) * K] += ViBj.T @ ytil[s]
    else:
        Vi = cov.vinv()
        E = enum.onehot.reshape(enum.size, n * J)
        Pi = E.T @ (w[:, None] * E)
        Mexp = Pi.reshape(n, J, n, J) * Vi[:, None, :, None]
        A = np.einsum("ia,ijpq,pb->jaqb", B, Mexp, B,
                      optimize=True).reshape(JK, JK)
        Z = ytil @ Vi
        agg = np.einsum("si,sij->ij", Z, enum.onehot)
        b = np.einsum("ia,ij->ja", B, agg).reshape(JK)

    for j in range(J):
        A[j * K:(j + 1) * K, j * K:(j + 1) * K] += 2.0 * lambdas[j] * R
    return A, b


def update_f_general(B, R, lambdas, y, cov, enum, P):
    """Joint coefficient update under the enumeration route."""
    A, b = general_normal_system(B, R, lambdas, y, cov, enum, P)
    phi = _solve_spd(A, b, "joint coefficient update")
    return phi.reshape(enum.J, B.shape[1])


# ---------------------------------------------------------------------------
# covariance dispatch
# ---------------------------------------------------------------------------

def _update_cov(cov_spec, theta, step, y, F_new, enum):
    kind = cov_spec.kind
    flags = []
    if kind == "iso_diag":
        return IsoDiagParams(
            sigma2=cov_mod.update_iso(step.marginals, y, F_new)), flags
    if kind == "state_diag":
        s2, flags = cov_mod.update_state_diag(
            step.marginals, y, F_new, theta.cov.sigma2)
        return StateDiagParams(sigma2=s2), flags
    Fs = gather_curves(F_new, enum.states)
    if kind == "unrestricted":
        return UnrestrictedParams(
            V=cov_mod.update_unrestricted(step.joint, y, Fs)), flags
    if kind == "homog_ri":
        s2, d = cov_mod.update_homog_ri(step.joint, y, Fs)
        return HomogRIParams(sigma2=s2, d=d), flags
    s2, d1, d2, flags = cov_mod.update_nonhomog_ri(
        step.joint, y, Fs, enum.onehot[:, :, 1], theta.cov)
    return NonHomogRIParams(sigma2=s2, d1=d1, d2=d2), flags


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _floor_probs(p, floor=_ALPHA_FLOOR):
    p = np.maximum(np.asarray(p, dtype=float), floor)
    return p / p.sum()


def initialize(dataset, latent_spec, cov_spec, B, R, lambdas,
               init="quantile-split", rng=None):
    """Starting parameters.

    The default "quantile-split" strategy fits one pooled penalized spline,
    banks points into J bands by residual quantile (lowest band = state 1),
    fits per-state splines to the banded points, and reads empirical state
    frequencies (floored at 0.05) and residual moments off the assignment.

    A supplied-theta dict (see datamodel.theta_from_dict) is validated and
    used as-is.
    """
    J = latent_spec.J
    y = dataset.y
    N, n = y.shape
    K = B.shape[1]

    if isinstance(init, dict):
        theta = theta_from_dict(init, latent_spec, cov_spec)
        _check_supplied(theta, latent_spec, cov_spec, J, K, n,
                        dataset.n_covariates)
        return theta

    lam_bar = float(np.mean(lambdas))
    ones = np.ones((N, n))
    M, rhs = diagonal_normal_system(B, R, lam_bar, ones, y)
    pooled = _solve_spd(M, rhs, "pooled initial fit")
    resid = y - (B @ pooled)[None, :]

    if J == 1:
        assign = np.zeros((N, n), dtype=int)
    else:
        edges = np.quantile(resid, np.arange(1, J) / J)
        assign = np.searchsorted(edges, resid, side="left")

    phi = np.empty((J, K))
    for j in range(J):
        w = (assign == j).astype(float)
        if w.sum() < 4:
            phi[j] = pooled
            continue
        M, rhs = diagonal_normal_system(B, R, lambdas[j], w, y)
        phi[j] = _solve_spd(M, rhs, f"initial fit, state {j + 1}")
    F0 = phi @ B.T

    r = y - F0[assign, np.arange(n)[None, :]]
    if latent_spec.kind == "iid":
        freq = np.bincount(assign.ravel(), minlength=J) / (N * n)
        alpha = IIDParams(p=_floor_probs(freq))
    elif latent_spec.kind == "markov":
        pi = np.bincount(assign[:, 0], minlength=J) / N
        A = np.zeros((J, J))
        for l in range(J):
            for j in range(J):
                A[l, j] = np.sum((assign[:, :-1] == l)
                                 & (assign[:, 1:] == j))
            A[l] = _floor_probs(A[l] if A[l].sum() > 0 else np.ones(J))
        alpha = MarkovParams(pi=_floor_probs(pi), A=A)
    else:
        hard = np.zeros((N, n, J))
        np.put_along_axis(hard, assign[:, :, None], 1.0, axis=2)
        soft = _ALPHA_FLOOR / J + (1 - _ALPHA_FLOOR) * hard
        beta0 = np.zeros((J - 1, dataset.n_covariates + 1))
        beta, _ = lat_mod._newton_beta(
            soft, dataset.covariates, beta0, 1e-8, 25, 30)
        alpha = CovariateParams(beta=beta)

    kind = cov_spec.kind
    if kind == "iso_diag":
        cov = IsoDiagParams(sigma2=max(float(np.mean(r ** 2)), 1e-12))
    elif kind == "state_diag":
        s2 = np.empty(J)
        for j in range(J):
            mask = assign == j
            s2[j] = np.mean(r[mask] ** 2) if mask.any() else np.mean(r ** 2)
        cov = StateDiagParams(sigma2=np.maximum(s2, 1e-12))
    elif kind == "unrestricted":
        C = (r.T @ r) / N
        cov = UnrestrictedParams(
            V=C + (0.05 * np.trace(C) / n + 1e-10) * np.eye(n))
    else:
        mk = r.mean(axis=1)
        within = max(float(np.mean((r - mk[:, None]) ** 2)), 1e-12)
        between = float(np.var(mk))
        d = max(between - within / n, 0.0) / within
        if kind == "homog_ri":
            cov = HomogRIParams(sigma2=within, d=d)
        else:
            cov = NonHomogRIParams(sigma2=within, d1=d, d2=max(d, 1e-2))
    return Theta(phi=phi, latent=alpha, cov=cov, lambdas=np.asarray(
        lambdas, dtype=float))


def _check_supplied(theta, latent_spec, cov_spec, J, K, n, M):
    if theta.phi.shape != (J, K):
        raise BadInit(f"phi shape {theta.phi.shape}, expected {(J, K)}")
    if theta.lambdas.shape != (J,) or np.any(theta.lambdas < 0):
        raise BadInit("lambdas must be J non-negative values")
    al = theta.latent
    if latent_spec.kind == "iid":
        if al.p.shape != (J,) or np.any(al.p < 0) \
                or abs(al.p.sum() - 1.0) > 1e-8:
            raise BadInit("p must be a length-J probability vector")
    elif latent_spec.kind == "markov":
        if al.pi.shape != (J,) or al.A.shape != (J, J):
            raise BadInit("pi must be length J and A must be J x J")
        if np.any(al.pi < 0) or abs(al.pi.sum() - 1.0) > 1e-8 \
                or np.any(al.A < 0) \
                or np.max(np.abs(al.A.sum(axis=1) - 1.0)) > 1e-8:
            raise BadInit("pi and rows of A must be probability vectors")
    else:
        if al.beta.shape != (J - 1, M + 1):
            raise BadInit(
                f"beta shape {al.beta.shape}, expected {(J - 1, M + 1)}")
    cp = theta.cov
    kind = cov_spec.kind
    if kind == "iso_diag" and cp.sigma2 <= 0:
        raise BadInit("sigma2 must be positive")
    if kind == "state_diag" and (
            cp.sigma2.shape != (J,) or np.any(cp.sigma2 <= 0)):
        raise BadInit("sigma2 must be J positive values")
    if kind == "unrestricted" and cp.V.shape != (n, n):
        raise BadInit(f"V must be {n} x {n}")
    if kind == "homog_ri" and (cp.sigma2 <= 0 or cp.d < 0):
        raise BadInit("need sigma2 > 0 and d >= 0")
    if kind == "nonhomog_ri" and (
            cp.sigma2 <= 0 or cp.d1 < 0 or cp.d2 < 0):
        raise BadInit("need sigma2 > 0 and d1, d2 >= 0")


# ---------------------------------------------------------------------------
# the driver
# ---------------------------------------------------------------------------

def ecm_fit(dataset, latent_spec, cov_spec, lambdas, K=None, tol=1e-8,
            max_iter=500, init="quantile-split",
            enumeration_cap=2 ** 20, compute_se=True,
            force_enumeration=False, store_joint=False):
    """Run the penalized ECM to convergence and assemble a FitReport.

    ``init`` is either the string "quantile-split" or a supplied-theta
    dict.  Standard errors are attempted when ``compute_se`` and the model
    falls in the supported set; failures demote to report warnings rather
    than errors.
    """
    model = validate(dataset, latent_spec, cov_spec,
                     enumeration_cap=enumeration_cap)
    J, n, N = latent_spec.J, dataset.n_points, dataset.n_replicates
    basis = build_basis(dataset.x, K)
    B = basis_matrix(basis, dataset.x)
    R = penalty_matrix(basis)

    lambdas = np.broadcast_to(
        np.asarray(lambdas, dtype=float).ravel(), (J,)).copy()
    use_enum = _use_enumeration(cov_spec, force_enumeration)
    enum = lat_mod.enumerate_states(n, J) if use_enum or store_joint \
        else None
    theta = initialize(dataset, latent_spec, cov_spec, B, R, lambdas,
                       init=init)
    theta.lambdas = lambdas

    warnings = []
    trace = []
    step = None
    converged = False
    iterations = 0
    for it in range(max_iter):
        F = theta.phi @ B.T
        step = e_step(dataset, F, theta, latent_spec, cov_spec, enum=enum,
                      force_enumeration=force_enumeration)
        obj = float(step.loglik.sum()) - penalty_value(theta, R)
        if trace:
            scale = max(1.0, abs(trace[-1]))
            if obj < trace[-1] - _ASCENT_RTOL * scale:
                raise MonotonicityViolation(trace[-1], obj)
            if abs(obj - trace[-1]) <= tol * scale:
                trace.append(obj)
                converged = True
                break
        trace.append(obj)
        iterations = it + 1

        cov = cov_mod.make_structure(cov_spec, theta.cov, n)
        if use_enum:
            phi_new = update_f_general(
                B, R, lambdas, dataset.y, cov, enum, step.joint)
        else:
            phi_new = update_f_diagonal(
                B, R, lambdas, dataset.y, step.marginals, theta.cov.sigma2)
        F_new = phi_new @ B.T
        cov_new, cflags = _update_cov(
            cov_spec, theta, step, dataset.y, F_new, enum)
        alpha_new, aflags = lat_mod.update_alpha(
            latent_spec, theta.latent, step.marginals,
            pairwise=step.pairwise, covariates=dataset.covariates)
        for fl in cflags + aflags:
            if fl not in warnings:
                warnings.append(fl)
        theta = Theta(phi=phi_new, latent=alpha_new, cov=cov_new,
                      lambdas=lambdas)
    else:
        # one final objective evaluation at the last parameters
        F = theta.phi @ B.T
        step = e_step(dataset, F, theta, latent_spec, cov_spec, enum=enum,
                      force_enumeration=force_enumeration)
        obj = float(step.loglik.sum()) - penalty_value(theta, R)
        scale = max(1.0, abs(trace[-1]))
        if obj < trace[-1] - _ASCENT_RTOL * scale:
            raise MonotonicityViolation(trace[-1], obj)
        converged = abs(obj - trace[-1]) <= tol * scale
        trace.append(obj)
        if not converged:
            warnings.append("not_converged")

    report = FitReport(
        theta=theta, knots=basis.knots, x=dataset.x,
        curves=theta.phi @ B.T, posteriors=step.marginals,
        loglik_trace=np.asarray(trace), iterations=iterations,
        converged=converged, warnings=warnings,
        joint_posteriors=step.joint if store_joint else None)

    if compute_se and J >= 2:
        from . import inference
        try:
            se, reason = inference.standard_errors_for_fit(
                dataset, latent_spec, cov_spec, theta, step,
                enumeration_cap=enumeration_cap)
            if se is not None:
                report.std_errors = se
            elif reason:
                warnings.append(f"se_unavailable: {reason}")
        except inference.SE_SOFT_ERRORS as exc:
            warnings.append(f"se_unavailable: {type(exc).__name__}: {exc}")
    return report
