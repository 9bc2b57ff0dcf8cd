"""Command line entry point: ``mjlspo gen|care|opt|check|flow``.

Exit codes: 0 success, 1 initial policy not mean-square stabilizing,
2 malformed input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .core import MatTuple, Policy, evaluate, is_mss
from .errors import (GenerationFailed, NotConvergedError, SingularSystem, StabilityError,
                     StepRejected)
from .policy_opt import (MethodKind, gradient, hessian_form, max_step, smoothness_constants)
from .riccati import solve_care
from . import verify

EXIT_OK = 0
EXIT_UNSTABLE = 1
EXIT_BAD_INPUT = 2
EXIT_NUMERIC = 3


class InitialPolicyUnstable(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _u64(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _eta(text: str):
    if text.lower() == "auto":
        return "auto"
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError("eta must be positive or 'auto'")
    return val


def _add_gen_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--state-dim", "-d", type=int, required=required)
    p.add_argument("--input-dim", "-k", type=int, required=required)
    p.add_argument("--num-modes", "-n", type=int, required=required)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--kappa", type=float, default=None,
                   help="Dirichlet self-transition concentration (default N-1)")
    p.add_argument("--target-radius", type=float, default=0.9)


def _gen_spec(args) -> bench.GenSpec:
    return bench.GenSpec(args.state_dim, args.input_dim, args.num_modes, seed=args.seed,
                         dirichlet_kappa=args.kappa, target_radius=args.target_radius)


def _problem(args):
    if getattr(args, "problem", None):
        return bench.load_problem(args.problem)
    if getattr(args, "state_dim", None) is None:
        raise ValueError("give a problem file or --state-dim/--input-dim/--num-modes")
    return bench.random_instance(_gen_spec(args))[0]


def _initial_policy(args, problem) -> Policy:
    K0 = bench.load_policy(args.policy, problem) if getattr(args, "policy", None) \
        else Policy.zeros(problem)
    stable, rho = is_mss(problem, K0)
    if not stable:
        raise InitialPolicyUnstable(f"initial policy is not mean-square stabilizing (rho={rho:.6g})")
    return K0


def cmd_gen(args) -> int:
    problem, _ = bench.random_instance(_gen_spec(args))
    _emit(bench.dumps_problem(problem), args.out)
    return EXIT_OK


def cmd_care(args) -> int:
    problem = bench.load_problem(args.problem)
    care = solve_care(problem, tol=args.tol, max_iter=args.max_iter)
    _emit(json.dumps(bench.care_to_dict(problem, care), indent=1) + "\n", args.out)
    return EXIT_OK


def _methods(text: str) -> list[str]:
    if text == "all":
        return ["gd", "gn", "npg"]
    return [MethodKind.parse(m).value for m in text.split(",")]


def cmd_opt(args) -> int:
    problem = _problem(args)
    K0 = _initial_policy(args, problem)
    methods = _methods(args.method)
    etas = {m: args.eta for m in methods}
    for spec in args.eta_for or []:
        name, _, val = spec.partition("=")
        etas[MethodKind.parse(name).value] = _eta(val)
    config = bench.ExperimentConfig(problem=problem, methods=methods, eta=etas, tol=args.tol,
                                    max_iter=args.max_iter, out_dir=args.out,
                                    svg_path=args.svg, K0=K0)
    result = bench.run_experiment(config)
    for name, tr in result.traces.items():
        last = tr.records[-1]
        print(f"{name}: status={tr.status.value} iterations={tr.iterations} "
              f"eta={tr.eta:.6g} rel_err={last.rel_err:.3e}", file=sys.stderr)
    if args.out is None:
        for name, tr in result.traces.items():
            if len(result.traces) > 1:
                sys.stdout.write(f"# {name}\n")
            sys.stdout.write(bench.trace_csv(tr))
    return EXIT_OK


def cmd_check(args) -> int:
    problem = _problem(args)
    K = _initial_policy(args, problem)
    care = solve_care(problem)
    ev = evaluate(problem, K)
    rng = np.random.default_rng(args.seed)
    E = MatTuple(rng.standard_normal(ev.K.blocks.shape))
    E = E / E.norm2()
    grad = gradient(problem, ev)
    fd = verify.fd_gradient(problem, ev)
    g_err = (grad - fd).norm2()
    g_tol = max(1e-6, 1e-5 * grad.norm2())
    hess = hessian_form(problem, ev, E)
    fd_h = verify.fd_hessian_form(problem, ev, E)
    h_rel = abs(hess - fd_h) / max(abs(fd_h), 1e-12)
    consts = smoothness_constants(problem, ev.cost, care=care)
    slack = verify.gradient_dominance_slack(problem, ev, care)
    K2 = Policy(care.gain)
    gap = verify.almost_smoothness_gap(problem, ev, K2)
    gap_scale = 1 + abs(ev.cost) + abs(evaluate(problem, K2).cost)
    bounds = verify.sublevel_bounds(problem, ev, E)
    checks = {
        "gradient_vs_fd": g_err <= g_tol,
        "hessian_vs_fd": h_rel <= 1e-4,
        "gradient_dominance": slack >= -1e-9,
        "almost_smoothness": gap <= 1e-9 * gap_scale,
        "sublevel_bounds": bounds.holds(),
    }
    report = {
        "cost": ev.cost,
        "optimal_cost": evaluate(problem, care.K_star).cost,
        "rho_lifted": ev.rho,
        "lyap_residual": ev.lyap_residual,
        "gradient_norm2": grad.norm2(),
        "gradient_fd_error": g_err,
        "hessian_form": hess,
        "hessian_fd": fd_h,
        "hessian_rel_error": h_rel,
        "gradient_dominance_slack": slack,
        "almost_smoothness_gap": gap,
        "constants": {"mu": consts.mu, "xi": consts.xi, "L": consts.smoothness_L,
                      "x_star_maxnorm": consts.x_star_maxnorm},
        "max_step": {m.value: max_step(problem, m, ev) for m in MethodKind},
        "bounds": bounds.__dict__,
        "checks": checks,
        "all_passed": all(checks.values()),
    }
    _emit(json.dumps(report, indent=1) + "\n", args.out)
    return EXIT_OK


def cmd_flow(args) -> int:
    problem = _problem(args)
    K0 = _initial_policy(args, problem)
    care = solve_care(problem)
    try:
        tr = verify.ode_flow(problem, K0, args.method, args.dt, args.t_end, care)
    except StabilityError as exc:
        raise SingularSystem(str(exc)) from exc
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "cost", "gap"])
    for t, c, g in zip(tr.times, tr.costs, tr.gaps):
        w.writerow([repr(float(t)), repr(float(c)), repr(float(g))])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mjlspo",
                                     description="Policy optimization for Markov jump LQR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random problem file")
    _add_gen_flags(p, required=True)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("care", help="solve the coupled Riccati equations")
    p.add_argument("problem")
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_care)

    p = sub.add_parser("opt", help="run policy optimization and write traces")
    p.add_argument("problem", nargs="?")
    _add_gen_flags(p, required=False)
    p.add_argument("--policy", default=None, help="initial gains JSON (default K=0)")
    p.add_argument("--method", default="all", help="gd|gn|npg|all or a comma list")
    p.add_argument("--eta", type=_eta, default="auto")
    p.add_argument("--eta-for", action="append", metavar="METHOD=ETA",
                   help="per-method step size override, repeatable")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--out", "-o", default=None, help="directory for trace_<method>.csv")
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_opt)

    p = sub.add_parser("check", help="oracle and inequality report for one policy")
    p.add_argument("problem", nargs="?")
    _add_gen_flags(p, required=False)
    p.add_argument("--policy", default=None)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("flow", help="integrate an ODE flow and write its cost trace")
    p.add_argument("problem", nargs="?")
    _add_gen_flags(p, required=False)
    p.add_argument("--policy", default=None)
    p.add_argument("--method", default="gd", choices=["gd", "gn", "npg"])
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--t-end", type=float, default=3.0)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_flow)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    try:
        return args.func(args)
    except InitialPolicyUnstable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (NotConvergedError, StepRejected, SingularSystem, GenerationFailed,
            StabilityError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
