"""Command-line interface: ``coxrs {simulate,fit,rs-solve,debias,experiment}``.

Exit codes: 0 success, 2 partial failure (some replicates failed, or a fit
hit separation), 1 fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cox import fit_cox, overfit_markers
from .debias import debias_solve
from .experiment import ExperimentConfig, emit_plotdata, run_experiment
from .rs_solver import solve_rs
from .survival import CensoringSpec, HazardSpec, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("coxrs")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _write_column(path: Path, values):
    path.write_text("".join(f"{float(v)!r}\n" for v in values))


def _write_step(path: Path, step, header="time,cumhaz"):
    with path.open("w") as fh:
        fh.write(header + "\n")
        for t, v in zip(step.jump_times, step.cumulative_values):
            fh.write(f"{float(t)!r},{float(v)!r}\n")


def cmd_simulate(args) -> int:
    hazard = HazardSpec(args.hazard)
    cens = CensoringSpec.none() if args.t_max <= 0 else CensoringSpec.uniform(args.t_max)
    p = args.p if args.p is not None else int(round(args.zeta * args.n))
    data = generate_dataset(args.n, p, args.S, hazard, cens, args.seed)
    path = write_dataset(args.out / "dataset.csv", data)
    print(f"wrote {path} (n={data.n}, p={data.p}, event fraction {data.event_fraction:.3f})")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = read_dataset(args.data)
    fit = fit_cox(data, max_iter=args.max_iter, grad_tol=args.grad_tol)
    _write_column(args.out / "beta_hat.csv", fit.beta_hat)
    _write_step(args.out / "breslow.csv", fit.breslow)
    info = {"converged": fit.converged, "iterations": fit.iterations,
            "final_gradient_norm": fit.final_gradient_norm,
            "separation_detected": fit.separation_detected,
            "log_likelihood": fit.log_likelihood, "n": data.n, "p": data.p}
    beta0 = data.meta.get("beta0")
    if beta0 is not None and np.any(beta0):
        mk = overfit_markers(fit.beta_hat, beta0, covariates=data.covariates)
        info.update(kappa_hat=mk.kappa_hat, v_hat=mk.v_hat, second_moment=mk.second_moment)
    _write_json(args.out / "fit.json", info)
    if fit.separation_detected:
        print("separation detected: the partial likelihood has no finite maximiser",
              file=sys.stderr)
        return EXIT_PARTIAL
    print(f"converged={fit.converged} after {fit.iterations} iterations")
    return EXIT_OK


def cmd_rs_solve(args) -> int:
    hazard = HazardSpec(args.hazard)
    cens = CensoringSpec.uniform(args.t_max)
    m = 1_000_000 if args.paper_scale and args.m is None else (args.m or 100_000)
    sol = solve_rs(args.zeta, args.S, hazard, cens, m=m, damping=args.damping, tol=args.tol,
                   max_sweeps=args.max_sweeps, rng=args.seed)
    _write_json(args.out / "rs_solution.json", {
        "zeta": args.zeta, "S": args.S, "m": m, "u": sol.u_star, "v": sol.v_star,
        "w": sol.w_star, "kappa": sol.kappa_star, "sweeps": sol.sweeps,
        "residuals": {k: float(v) for k, v in sol.residuals.items()},
        "mean_xi_squared": sol.mean_xi_squared, "second_moment": sol.second_moment})
    t = sol.lambda_rs.jump_times
    with (args.out / "rs_lambda.csv").open("w") as fh:
        fh.write("t,Lambda0,LambdaRS\n")
        for ti, l0, l in zip(t, hazard.cumhaz(t), sol.lambda_rs.cumulative_values):
            fh.write(f"{float(ti)!r},{float(l0)!r},{float(l)!r}\n")
    print(f"u={sol.u_star:.6g} v={sol.v_star:.6g} w={sol.w_star:.6g} "
          f"kappa={sol.kappa_star:.6g} ({sol.sweeps} sweeps)")
    return EXIT_OK


def cmd_debias(args) -> int:
    data = read_dataset(args.data)
    fit = fit_cox(data)
    if fit.separation_detected:
        print("separation detected: cannot de-bias", file=sys.stderr)
        return EXIT_FATAL
    res = debias_solve(data, fit, S_bracket=(args.S_min, args.S_max), path=args.path,
                       m=args.m, seed=args.seed)
    out = res.to_dict()
    if args.beta0 is not None:
        beta0 = np.loadtxt(args.beta0, ndmin=1)
        out["evaluation"] = {
            "S_true": float(np.linalg.norm(beta0)),
            "kappa_hat": overfit_markers(fit.beta_hat, beta0).kappa_hat,
            "kappa_tilde": overfit_markers(res.beta_tilde, beta0).kappa_hat,
        }
    _write_json(args.out / "debias.json", out)
    _write_column(args.out / "beta_tilde.csv", res.beta_tilde)
    _write_step(args.out / "lambda_tilde.csv", res.lambda_tilde)
    _write_step(args.out / "lambda_c.csv", res.lambda_c_tilde)
    print(f"S*={res.S_star:.4f} kappa*={res.kappa_star:.4f} predicted sd {res.predicted_sd:.4g}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    mapping = {}
    if args.config is not None:
        cfg = ExperimentConfig.from_file(args.config)
        mapping = {k: v for k, v in vars(cfg).items()}
    for item in args.set or []:
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    if args.scenario:
        mapping["scenario"] = args.scenario
    if args.seed is not None:
        mapping["seed"] = args.seed
    if args.threads:
        mapping["threads"] = args.threads
    if args.paper_scale:
        mapping["replicates"] = 500
        mapping["m"] = 1_000_000
    cfg = ExperimentConfig.from_mapping(mapping)
    report = run_experiment(cfg)
    manifest = emit_plotdata(report, args.out)
    (args.out / "config.txt").write_text(cfg.to_text())
    print(f"{len(manifest['files'])} files written to {args.out}; "
          f"{report.failures} failed replicate(s)")
    return EXIT_PARTIAL if report.failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS,
                        help="output directory (created if missing)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for replicates")
    common.add_argument("--paper-scale", action="store_true", default=argparse.SUPPRESS,
                        help="500 replicates and populations of 10^6")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="coxrs", parents=[common],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common], help="generate a survival data set")
    sp.add_argument("--n", type=int, default=400)
    sp.add_argument("--p", type=int)
    sp.add_argument("--zeta", type=float, default=0.25, help="p/n when --p is not given")
    sp.add_argument("--S", type=float, default=1.0, help="signal strength (beta0 = S e1)")
    sp.add_argument("--hazard", default="log_logistic", choices=["log_logistic", "weibull_like"])
    sp.add_argument("--t-max", type=float, default=4.0, help="uniform censoring end; 0 = none")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", parents=[common], help="Cox ML fit and Breslow estimator")
    sp.add_argument("data", type=Path, help="dataset CSV")
    sp.add_argument("--max-iter", type=int, default=100)
    sp.add_argument("--grad-tol", type=float, default=1e-8)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("rs-solve", parents=[common], help="solve the RS equations")
    sp.add_argument("--zeta", type=float, required=True)
    sp.add_argument("--S", type=float, default=1.0)
    sp.add_argument("--hazard", default="log_logistic", choices=["log_logistic", "weibull_like"])
    sp.add_argument("--t-max", type=float, default=4.0)
    sp.add_argument("--m", type=int)
    sp.add_argument("--damping", type=float, default=0.5)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-sweeps", type=int, default=500)
    sp.set_defaults(func=cmd_rs_solve)

    sp = sub.add_parser("debias", parents=[common], help="de-bias a Cox fit")
    sp.add_argument("data", type=Path, help="dataset CSV")
    sp.add_argument("--beta0", type=Path, help="true beta0 (one value per line), diagnostics only")
    sp.add_argument("--path", choices=["quadrature", "population"], default="quadrature")
    sp.add_argument("--m", type=int, default=100_000, help="population size (population path)")
    sp.add_argument("--S-min", type=float, default=0.05)
    sp.add_argument("--S-max", type=float, default=5.0)
    sp.set_defaults(func=cmd_debias)

    sp = sub.add_parser("experiment", parents=[common], help="run a replicated study")
    sp.add_argument("--config", type=Path, help="key = value configuration file")
    sp.add_argument("--scenario")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a configuration key (repeatable)")
    sp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("out", Path(".")), ("threads", None),
                          ("paper_scale", False), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "experiment" and args.seed is None:
        args.seed = 0
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
