"""The ``gks`` command line: one-off smoothing runs and the benchmark suite.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .. import plq
from .. import statespace as ss
from .. import blocktridiag as btd
from .. import firstorder as fo
from .. import interior as ip
from . import config as cfgmod
from . import experiments as ex


SOLVERS = ("rts", "mf", "subgrad", "proxgrad", "fista", "admm",
           "cp-v1", "cp-v2", "ip")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gks",
                                 description="generalized Kalman smoothing")
    sub = ap.add_subparsers(dest="command", required=True)

    sm = sub.add_parser("smooth", help="smooth one model from a JSON file")
    sm.add_argument("--model", required=True, help="model JSON path")
    sm.add_argument("--solver", default="rts", choices=SOLVERS)
    sm.add_argument("--loss-v", default="l2", help="measurement loss, e.g. huber:kappa=1")
    sm.add_argument("--loss-j", default="l2", help="process loss")
    sm.add_argument("--gamma", type=float, default=1.0)
    sm.add_argument("--eps", type=float, default=1e-8)
    sm.add_argument("--max-iters", type=int, default=10000)
    sm.add_argument("--tau", type=float, default=None)
    sm.add_argument("--sigma", type=float, default=None)
    sm.add_argument("--box", default=None, metavar="LO:HI",
                    help="box constraint on every state coordinate")
    sm.add_argument("--ip-theta", type=float, default=0.1)
    sm.add_argument("--ip-eps", type=float, default=1e-8)
    sm.add_argument("--ip-max-iters", type=int, default=200)
    sm.add_argument("--out", default=None, help="CSV output path (default stdout)")

    be = sub.add_parser("bench", help="run a benchmark experiment")
    be.add_argument("experiment", choices=list(cfgmod.EXPERIMENTS))
    be.add_argument("--config", default=None, help="TOML config path")
    be.add_argument("--out", required=True, help="output directory")
    be.add_argument("--seed", type=int, default=None)
    return ap


def _parse_box(text):
    lo, _, hi = text.partition(":")
    return plq.Box(float(lo), float(hi))


def run_smooth(args) -> int:
    with open(args.model) as fh:
        model = ss.model_from_json(fh.read())
    bad = ss.validate(model)
    if bad:
        print("invalid model: " + "; ".join(str(v) for v in bad), file=sys.stderr)
        return 2
    if model.S_seq is not None:
        model = ss.decorrelate(model)
    pw = ss.pseudo_weights(model)
    singular = len(pw.equality_rows) > 0
    sysm = ss.stack(model, pseudo=True)
    V = plq.parse_loss(args.loss_v)
    J = plq.parse_loss(args.loss_j)
    cons = _parse_box(args.box) if args.box else plq.Unconstrained()
    p = fo.SmootherProblem(sysm, V, J, args.gamma, cons)

    solver = args.solver
    if singular and solver not in ("ip",):
        print("singular covariance blocks need the interior-point solver "
              "(--solver ip)", file=sys.stderr)
        return 2
    if solver in ("rts", "mf"):
        if not (isinstance(V, plq.Quadratic) and isinstance(J, plq.Quadratic)
                and isinstance(cons, plq.Unconstrained)):
            print(f"--solver {solver} handles the unconstrained least-squares "
                  "smoother only", file=sys.stderr)
            return 2
        T, r = btd.assemble_normal_equations(sysm)
        x = btd.solve_rts(T, r) if solver == "rts" else btd.solve_mf(T, r)
    elif solver == "ip":
        prob = ip.smoother_to_plq(p, equality_rows=pw.equality_rows)
        x, _, _ = ip.solve_ip(prob, eps=args.ip_eps,
                              max_iters=args.ip_max_iters, theta=args.ip_theta)
    elif solver == "subgrad":
        x = fo.solve_subgradient(p, max_iters=args.max_iters).x
    elif solver == "proxgrad":
        x = fo.solve_prox_grad(p, eps=args.eps, max_iters=args.max_iters).x
    elif solver == "fista":
        x = fo.solve_fista(p, eps=args.eps, max_iters=args.max_iters).x
    elif solver == "admm":
        x = fo.solve_admm_l1(p, tau=args.tau or 1.0, eps=args.eps,
                             max_iters=args.max_iters).x
    else:
        x = fo.solve_cp(p, variant=solver.split("-")[1], sigma=args.sigma,
                        tau=args.tau, eps=args.eps, max_iters=args.max_iters).x

    xs = sysm.states(x)
    header = ["t"] + [f"x{j}" for j in range(sysm.n)]
    rows = [[t] + list(xs[t]) for t in range(sysm.N + 1)]
    if args.out:
        ex.write_csv(args.out, header, rows)
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(ex._fmt(v) for v in row))
    return 0


def run_bench(args) -> int:
    if args.config:
        cfg = cfgmod.load_toml(args.config, args.experiment, seed=args.seed)
    else:
        cfg = cfgmod.resolve(args.experiment, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    name = args.experiment
    if name == "rates":
        result = ex.run_rates(cfg)
        result.to_csv(os.path.join(args.out, "rates.csv"))
    elif name == "dc-impulse":
        table = ex.run_impulsive_mc(cfg)
        table.to_csv(os.path.join(args.out, "dc-impulse.csv"))
        _print_medians(table)
    elif name == "dc-outliers":
        table = ex.run_outlier_mc(cfg)
        table.to_csv(os.path.join(args.out, "dc-outliers.csv"))
        control = ex.run_outlier_mc({**cfg, "alpha": 0.0})
        control.to_csv(os.path.join(args.out, "dc-outliers-control.csv"))
        _print_medians(table)
    else:
        result = ex.run_constrained(cfg)
        result.to_csv(os.path.join(args.out, "constrained.csv"))
        for k, v in result.rmse.items():
            print(f"RMSE {k}: {v:.6f}")
    cfgmod.dump_toml(cfg, name, os.path.join(args.out, "config.resolved.toml"))
    return 0


def _print_medians(table):
    for name, stats in table.summary().items():
        print(f"median fit {name}: {stats['median']:.2f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "smooth":
            return run_smooth(args)
        return run_bench(args)
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ip.MaxItersExceeded, ip.LineSearchFailure, ip.SingularKkt,
            btd.NotPositiveDefinite, btd.SingularBlock, fo.StepSizeViolation,
            ss.InvalidModel, ss.SingularR) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
