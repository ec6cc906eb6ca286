"""Command-line interface.

Subcommands: ``fit``, ``cv``, ``classify``, ``simulate``, ``simstudy``.
Exit codes: 0 on success, 2 for validation problems (an ``error.json`` is
written to the output directory), 3 for numerical failures.  All outputs
are written atomically (temp file + rename).
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import cv as cv_mod
from . import datamodel as dm
from . import sim as sim_mod
from .em import classify_marginals, e_step, ecm_fit
from .errors import (NumericalError, SpecMismatch, SwitchCurveError,
                     ValidationError)
from .latent import enumerate_states


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    out = args.out
    os.makedirs(out, exist_ok=True)
    try:
        args.func(args)
    except ValidationError as exc:
        _write_error(out, exc)
        return 2
    except NumericalError as exc:
        _write_error(out, exc)
        return 3
    except SwitchCurveError as exc:   # pragma: no cover - safety net
        _write_error(out, exc)
        return 2
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="switchcurve",
        description="Switching nonparametric regression for repeated "
                    "curves")
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("fit", help="fit the model to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("cv", help="select smoothing parameters by "
                                  "cross-validation, then fit")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("classify", help="posteriors and hard labels for a "
                                        "dataset under a saved fit")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True, help="fit.json from a prior run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("simulate", help="draw one dataset from a stock "
                                        "design")
    p.add_argument("--design", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("simstudy", help="replication study over a stock "
                                        "design")
    p.add_argument("--design", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--reps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simstudy)
    return parser


def _write_error(out, exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    dm.atomic_write_text(os.path.join(out, "error.json"),
                         dm.dumps_json(doc))


def _load_inputs(args):
    dataset = dm.read_dataset_csv(args.data)
    with open(args.config) as fh:
        cfg = dm.parse_config(json.load(fh))
    dm.validate(dataset, cfg.latent, cfg.cov,
                enumeration_cap=cfg.enumeration_cap)
    return dataset, cfg


def _cmd_fit(args):
    dataset, cfg = _load_inputs(args)
    if isinstance(cfg.lambdas, str):
        result = _run_cv(dataset, cfg)
        _write_cv(args.out, result)
        report = result.fit
    else:
        report = ecm_fit(
            dataset, cfg.latent, cfg.cov, lambdas=cfg.lambdas, K=cfg.K,
            tol=cfg.tol, max_iter=cfg.max_iter, init=cfg.init,
            enumeration_cap=cfg.enumeration_cap)
    _write_fit_outputs(args.out, report, cfg, dataset)


def _cmd_cv(args):
    dataset, cfg = _load_inputs(args)
    result = _run_cv(dataset, cfg)
    _write_cv(args.out, result)
    _write_fit_outputs(args.out, result.fit, cfg, dataset)


def _run_cv(dataset, cfg):
    cv_cfg = cv_mod.CVConfig(**{
        k: (np.asarray(v, dtype=float) if k == "grid" else v)
        for k, v in cfg.cv.items()})
    return cv_mod.select_lambdas(
        dataset, cfg.latent, cfg.cov, config=cv_cfg, K=cfg.K, tol=cfg.tol,
        max_iter=cfg.max_iter, init=cfg.init)


def _cmd_classify(args):
    dataset = dm.read_dataset_csv(args.data)
    with open(args.fit) as fh:
        saved, latent, cov = dm.report_from_dict(json.load(fh))
    dm.validate(dataset, latent, cov)
    if dataset.n_points != saved.x.size or np.max(
            np.abs(dataset.x - saved.x)) > 1e-9:
        raise SpecMismatch(
            "dataset grid differs from the grid of the saved fit")
    enum = (enumerate_states(dataset.n_points, saved.theta.J)
            if not cov.diagonal else None)
    step = e_step(dataset, saved.curves, saved.theta, latent, cov,
                  enum=enum)
    _write_posteriors(args.out, step.marginals)
    _write_classified(args.out, step.marginals)


def _cmd_simulate(args):
    design = sim_mod.stock_design(args.design)
    if args.N is not None:
        design.N = args.N
    dataset, z = sim_mod.generate_dataset(design, seed=args.seed)
    dm.write_dataset_csv(dataset, os.path.join(args.out, "data.csv"))
    F = sim_mod.default_true_functions(dataset.x)
    fields = asdict(design)
    fields["x"] = [float(v) for v in design.x]
    fields["lambdas"] = [float(v) for v in design.lambdas]
    truth = {
        "design": fields,
        "seed": int(args.seed),
        "true_curves": F.tolist(),
        "true_states": (z + 1).tolist(),
    }
    dm.atomic_write_text(os.path.join(args.out, "truth.json"),
                         dm.dumps_json(truth))


def _cmd_simstudy(args):
    design = sim_mod.stock_design(args.design)
    threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    study = sim_mod.run_study(design, n_reps=args.reps, seed=args.seed,
                              threads=threads)
    dm.atomic_write_text(os.path.join(args.out, "study_report.json"),
                         dm.dumps_json(study.to_dict()))
    lines = ["parameter,truth,mean,sd,mean_se,coverage90,coverage95"]
    for name, entry in study.params.items():
        lines.append(",".join([
            name, repr(entry["truth"]), repr(entry["mean"]),
            repr(entry["sd"]), repr(entry["mean_se"]),
            repr(entry["coverage90"]), repr(entry["coverage95"])]))
    dm.atomic_write_text(os.path.join(args.out, "params_summary.csv"),
                         "\n".join(lines) + "\n")
    lines = ["component,truth,mean,sd"]
    for name, entry in study.variance.items():
        lines.append(",".join([
            name, repr(entry["truth"]), repr(entry["mean"]),
            repr(entry["sd"])]))
    dm.atomic_write_text(os.path.join(args.out, "variance_summary.csv"),
                         "\n".join(lines) + "\n")
    lines = ["x," + ",".join(
        f"emse_f{j + 1}" for j in range(study.emse.shape[0]))]
    for i, xv in enumerate(study.x):
        lines.append(",".join(
            [repr(float(xv))] + [repr(float(study.emse[j, i]))
                                 for j in range(study.emse.shape[0])]))
    dm.atomic_write_text(os.path.join(args.out, "emse.csv"),
                         "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared writers
# ---------------------------------------------------------------------------

def _write_cv(out, result):
    doc = {
        "lambdas": [float(v) for v in result.lambdas],
        "grid": [float(v) for v in result.grid],
        "scores": [[float(v) for v in row] for row in result.scores],
        "n_outer": int(result.n_outer),
        "converged": bool(result.converged),
        "n_fallback": int(result.n_fallback),
    }
    dm.atomic_write_text(os.path.join(out, "cv.json"), dm.dumps_json(doc))


def _write_fit_outputs(out, report, cfg, dataset):
    doc = dm.report_to_dict(report, cfg.latent.kind, cfg.cov.kind)
    dm.atomic_write_text(os.path.join(out, "fit.json"), dm.dumps_json(doc))

    J = report.theta.J
    lines = ["x," + ",".join(f"f{j + 1}" for j in range(J))]
    for i, xv in enumerate(report.x):
        lines.append(",".join(
            [repr(float(xv))] + [repr(float(report.curves[j, i]))
                                 for j in range(J)]))
    dm.atomic_write_text(os.path.join(out, "curves.csv"),
                         "\n".join(lines) + "\n")
    _write_posteriors(out, report.posteriors)
    _write_classified(out, report.posteriors)


def _write_posteriors(out, marginals):
    N, n, J = marginals.shape
    lines = ["replicate,point," + ",".join(
        f"p{j + 1}" for j in range(J))]
    for k in range(N):
        for i in range(n):
            lines.append(",".join(
                [str(k + 1), str(i + 1)]
                + [repr(float(marginals[k, i, j])) for j in range(J)]))
    dm.atomic_write_text(os.path.join(out, "posteriors.csv"),
                         "\n".join(lines) + "\n")


def _write_classified(out, marginals):
    labels, ties = classify_marginals(marginals)
    lines = ["replicate,point,state,tie"]
    N, n = labels.shape
    for k in range(N):
        for i in range(n):
            lines.append(f"{k + 1},{i + 1},{labels[k, i] + 1},"
                         f"{int(ties[k, i])}")
    dm.atomic_write_text(os.path.join(out, "classified.csv"),
                         "\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
