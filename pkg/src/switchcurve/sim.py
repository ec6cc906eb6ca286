"""Simulation designs and the replication study harness.

Three stock designs mirror the estimation settings the package targets:

1. "iid": two states drawn independently per point (p1 = 0.5), shared
   random intercept per replicate (homog_ri noise).
2. "markov": two-state chain along the grid (a12 = 0.3, a21 = 0.4,
   pi = (0.5, 0.5)), same noise as design 1.
3. "covariate": state probabilities follow a logistic in a standard-normal
   covariate (beta0 = 2, beta1 = 5), isotropic noise.

The default truth curves live on [x_min, x_max] with range about [0, 0.1]
and two interior extrema; the low curve is exactly the high curve minus
0.1.  Each study replication generates data from a replication-specific
seed, fits with a truth start, aligns labels to the truth by total squared
curve error, and records parameter estimates, standard errors, confidence
interval hits, and pointwise squared curve errors.
"""

import concurrent.futures
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import lstsq
from scipy.stats import norm

from .basis import basis_matrix, build_basis
from .datamodel import CovSpec, LatentSpec, MultiCurveDataset
from .em import ecm_fit

DEFAULT_GRID = np.linspace(1.0, 100.0, 10)


def default_true_functions(x):
    """Truth curves, shape (2, len(x)); state 1 is the lower curve."""
    x = np.asarray(x, dtype=float)
    t = (x - x[0]) / (x[-1] - x[0])
    f2 = 0.05 + 0.04 * np.sin(2 * np.pi * t) + 0.01 * np.sin(4 * np.pi * t)
    return np.vstack([f2 - 0.1, f2])


@dataclass
class SimDesign:
    """One data-generating configuration."""

    kind: str                       # "iid" | "markov" | "covariate"
    N: int = 100
    x: np.ndarray = field(default_factory=lambda: DEFAULT_GRID.copy())
    p1: float = 0.5
    pi1: float = 0.5
    a12: float = 0.3
    a21: float = 0.4
    beta0: float = 2.0
    beta1: float = 5.0
    sigma2: float = 1e-5
    tau2: float = 1e-4
    lambdas: tuple = (1e-4, 1e-4)
    K: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.kind not in ("iid", "markov", "covariate"):
            raise ValueError(f"unknown design kind {self.kind!r}")

    @property
    def latent_spec(self):
        return LatentSpec(kind=self.kind, J=2)

    @property
    def cov_spec(self):
        if self.kind == "covariate":
            return CovSpec(kind="iso_diag")
        return CovSpec(kind="homog_ri")

    def truth_params(self):
        """Alpha and covariance truth in report/init dict form."""
        if self.kind == "iid":
            alpha = {"p": [self.p1, 1.0 - self.p1]}
        elif self.kind == "markov":
            alpha = {"pi": [self.pi1, 1.0 - self.pi1],
                     "A": [[1.0 - self.a12, self.a12],
                           [self.a21, 1.0 - self.a21]]}
        else:
            alpha = {"beta": [[self.beta0, self.beta1]]}
        if self.kind == "covariate":
            cov = {"sigma2": self.sigma2}
        else:
            cov = {"sigma2": self.sigma2,
                   "d": self.tau2 / self.sigma2}
        return alpha, cov


DESIGNS = {
    1: SimDesign(kind="iid"),
    2: SimDesign(kind="markov"),
    3: SimDesign(kind="covariate", sigma2=5e-5, tau2=0.0),
}


def stock_design(number):
    """Designs 1-3 with their standard parameter values."""
    d = DESIGNS[int(number)]
    return SimDesign(**{**asdict(d), "x": d.x.copy()})


def generate_dataset(design, seed):
    """Draw one dataset; returns (dataset, true states (N, n) 0-based)."""
    rng = np.random.default_rng(seed)
    n = design.x.size
    N = design.N
    F = default_true_functions(design.x)

    covariates = None
    if design.kind == "iid":
        z = (rng.random((N, n)) >= design.p1).astype(int)
    elif design.kind == "markov":
        z = np.empty((N, n), dtype=int)
        u = rng.random((N, n))
        z[:, 0] = u[:, 0] >= design.pi1
        stay0 = 1.0 - design.a12
        for i in range(1, n):
            prev = z[:, i - 1]
            p_to_0 = np.where(prev == 0, stay0, design.a21)
            z[:, i] = u[:, i] >= p_to_0
    else:
        v = rng.standard_normal((N, n))
        p1 = 1.0 / (1.0 + np.exp(design.beta0 + design.beta1 * v))
        z = (rng.random((N, n)) >= p1).astype(int)
        covariates = v[:, :, None]

    y = F[z, np.arange(n)[None, :]]
    if design.tau2 > 0:
        y = y + rng.normal(0.0, np.sqrt(design.tau2), size=(N, 1))
    y = y + rng.normal(0.0, np.sqrt(design.sigma2), size=(N, n))
    return MultiCurveDataset(x=design.x, y=y, covariates=covariates), z


def truth_start(design, dataset):
    """Supplied-init dict with the data-generating parameter values."""
    K = design.K if design.K is not None else min(dataset.n_points, 15)
    basis = build_basis(dataset.x, K)
    B = basis_matrix(basis, dataset.x)
    F = default_true_functions(dataset.x)
    phi0 = lstsq(B, F.T)[0].T
    alpha, cov = design.truth_params()
    return {"phi": phi0.tolist(), "alpha": alpha, "cov": cov,
            "lambdas": list(design.lambdas)}


def fit_design(design, dataset, compute_se=True):
    """Truth-start ECM fit of a generated dataset."""
    return ecm_fit(
        dataset, design.latent_spec, design.cov_spec,
        lambdas=np.asarray(design.lambdas), K=design.K,
        init=truth_start(design, dataset), compute_se=compute_se)


# ---------------------------------------------------------------------------
# label alignment
# ---------------------------------------------------------------------------

def align_to_truth(report, F_true):
    """Permute state labels to minimize total squared curve error.

    Returns (aligned curves, aligned parameter dict, aligned SE dict,
    permutation).  Two-state models only, which covers the stock designs.
    """
    direct = float(np.sum((report.curves - F_true) ** 2))
    swapped = float(np.sum((report.curves[::-1] - F_true) ** 2))
    theta = report.theta
    se = dict(report.std_errors or {})
    if direct <= swapped:
        perm = (0, 1)
        curves = report.curves
        params = _flat_params(theta, perm)
    else:
        perm = (1, 0)
        curves = report.curves[::-1]
        params = _flat_params(theta, perm)
        se = _swap_se(se)
    return curves, params, se, perm


def _flat_params(theta, perm):
    al = theta.latent
    out = {}
    if hasattr(al, "p"):
        out["p1"] = float(al.p[perm[0]])
    elif hasattr(al, "pi"):
        out["pi1"] = float(al.pi[perm[0]])
        out["a12"] = float(al.A[perm[0], perm[1]])
        out["a21"] = float(al.A[perm[1], perm[0]])
    else:
        sign = 1.0 if perm == (0, 1) else -1.0
        out["beta0"] = sign * float(al.beta[0, 0])
        out["beta1"] = sign * float(al.beta[0, 1])
    cp = theta.cov
    if hasattr(cp, "d"):
        out["sigma2"] = float(cp.sigma2)
        out["tau2"] = float(cp.tau2)
    elif hasattr(cp, "sigma2"):
        s2 = np.atleast_1d(np.asarray(cp.sigma2, dtype=float))
        if s2.size > 1:
            out["sigma2_1"] = float(s2[perm[0]])
            out["sigma2_2"] = float(s2[perm[1]])
        else:
            out["sigma2"] = float(s2[0])
    return out


def _swap_se(se):
    swapped = dict(se)
    if "a12" in se and "a21" in se:
        swapped["a12"], swapped["a21"] = se["a21"], se["a12"]
    # p1, pi1, beta SEs are invariant under a two-state relabel
    return swapped


# ---------------------------------------------------------------------------
# the study harness
# ---------------------------------------------------------------------------

_STUDY_PARAMS = {
    "iid": ("p1",),
    "markov": ("pi1", "a12", "a21"),
    "covariate": ("beta0", "beta1"),
}


@dataclass
class StudyReport:
    """Aggregates over study replications."""

    design_kind: str
    n_reps: int
    seed: int
    x: np.ndarray
    params: dict            # name -> {truth, mean, sd, mean_se, cover...}
    variance: dict          # sigma2 / tau2 summaries
    emse: np.ndarray        # (J, n) pointwise mean squared curve error
    estimates: dict         # name -> (n_reps,) raw estimates
    ses: dict               # name -> (n_reps,) raw standard errors
    n_se_missing: int = 0

    def to_dict(self):
        return {
            "design": self.design_kind,
            "n_reps": int(self.n_reps),
            "seed": int(self.seed),
            "x": [float(v) for v in self.x],
            "params": self.params,
            "variance": self.variance,
            "emse": [[float(v) for v in row] for row in self.emse],
            "n_se_missing": int(self.n_se_missing),
        }


def _truth_values(design):
    truth = {}
    if design.kind == "iid":
        truth["p1"] = design.p1
    elif design.kind == "markov":
        truth.update(pi1=design.pi1, a12=design.a12, a21=design.a21)
    else:
        truth.update(beta0=design.beta0, beta1=design.beta1)
    truth["sigma2"] = design.sigma2
    if design.kind != "covariate":
        truth["tau2"] = design.tau2
    return truth


def run_replication(design, seed, rep):
    """Generate, fit, and score one study replication."""
    dataset, _ = generate_dataset(design, seed=[seed, rep])
    report = fit_design(design, dataset)
    F_true = default_true_functions(dataset.x)
    curves, params, se, _ = align_to_truth(report, F_true)
    return {
        "params": params,
        "se": {k: se.get(k, np.nan) for k in _STUDY_PARAMS[design.kind]},
        "sqerr": (curves - F_true) ** 2,
        "converged": report.converged,
    }


def run_study(design, n_reps=300, seed=0, threads=1,
              levels=(0.90, 0.95)):
    """Run the full replication study and aggregate."""
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(
                _replication_task,
                [(design, seed, r) for r in range(n_reps)],
                chunksize=max(1, n_reps // (8 * threads))))
    else:
        results = [run_replication(design, seed, r)
                   for r in range(n_reps)]

    names = _STUDY_PARAMS[design.kind]
    truth = _truth_values(design)
    estimates = {k: np.array([res["params"][k] for res in results])
                 for k in results[0]["params"]}
    ses = {k: np.array([res["se"][k] for res in results]) for k in names}
    zs = {lev: float(norm.ppf(0.5 + lev / 2.0)) for lev in levels}

    params = {}
    n_missing = 0
    for name in names:
        est = estimates[name]
        se = ses[name]
        ok = np.isfinite(se)
        n_missing = max(n_missing, int(np.sum(~ok)))
        entry = {
            "truth": float(truth[name]),
            "mean": float(est.mean()),
            "sd": float(est.std(ddof=1)),
            "mean_se": float(se[ok].mean()) if ok.any() else float("nan"),
        }
        for lev, z in zs.items():
            hit = np.abs(est[ok] - truth[name]) <= z * se[ok]
            entry[f"coverage{int(round(lev * 100))}"] = (
                float(hit.mean()) if ok.any() else float("nan"))
        params[name] = entry

    variance = {}
    for name in ("sigma2", "tau2"):
        if name in estimates:
            variance[name] = {
                "truth": float(truth[name]),
                "mean": float(estimates[name].mean()),
                "sd": float(estimates[name].std(ddof=1)),
            }

    emse = np.mean([res["sqerr"] for res in results], axis=0)
    return StudyReport(
        design_kind=design.kind, n_reps=n_reps, seed=seed, x=design.x,
        params=params, variance=variance, emse=emse,
        estimates=estimates, ses=ses, n_se_missing=n_missing)


def _replication_task(args):
    design, seed, rep = args
    return run_replication(design, seed, rep)
