"""Experiment command line for the step-controlled Newton library.

Four subcommands reproduce the desk-scale studies: ``atan-demo`` walks the
scalar arctan equation with step control, ``carrier`` solves the singularly
perturbed Carrier problem on a fixed finite-difference grid (optionally
sweeping the step-bound factor), ``minsurf1d`` solves the 1-D minimal
surface equation on a finite element mesh, and ``carrier-adaptive`` runs the
contraction-rate-driven mesh refinement loop.

Outputs are deterministic for a given configuration: CSV traces carry a
'# key=value' echo of the full configuration, JSON files one object with
"config", "trace" and "summary" (plus "history" for the adaptive run).
Exit codes: 0 solved, 1 solver failure (the partial trace is still
written), 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .adaptive import RefinementPolicy, adaptive_solve
from .fem import FeSpace1D, Mesh1D
from .problems import (ArctanProblem, CarrierProblem, GalerkinProblem,
                       carrier_semilinear, minimal_surface_1d)
from .spaces import StateVector
from .stepcontrol import BscConfig, solve, trace_to_json, write_trace_csv


class ConfigError(Exception):
    """Invalid experiment configuration; the message names the field."""


def _require(cond: bool, flag: str, msg: str):
    if not cond:
        raise ConfigError(f"invalid {flag}: {msg}")


def _thread_budget() -> int:
    raw = os.environ.get("BSC_NEWTON_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"invalid BSC_NEWTON_THREADS: {raw!r} is not an integer")
    _require(n >= 1, "BSC_NEWTON_THREADS", "must be >= 1")
    return n


def _bsc_kwargs(args) -> dict:
    return {
        "low_factor": args.low_factor,
        "high_factor": args.high_factor,
        "t0": args.t0,
        "smoothing": args.smoothing,
        "residual_tol": args.residual_tol,
        "max_iterations": args.max_iterations,
    }


def _step_bound_fields(args) -> dict:
    if getattr(args, "h", None) is not None:
        _require(args.h > 0, "--h", "must be positive")
        return {"step_bound": args.h}
    _require(args.h_rel > 0, "--h-rel", "must be positive")
    return {"step_bound_rel": args.h_rel}


def _write_outputs(outcome, echo: dict, args, extended: bool, history=None) -> str:
    path = args.output
    if path is None:
        path = f"{echo['experiment'].replace('-', '_')}_trace.{args.format}"
    if args.format == "csv":
        with open(path, "w", newline="") as fh:
            write_trace_csv(outcome, fh, echo=echo, extended=extended)
    else:
        obj = trace_to_json(outcome, echo)
        if history is not None:
            obj["history"] = history
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")
    return path


def _print_pretty(outcome):
    print("   k       t          u         du        dup     Hprime")
    for rec in outcome.trace:
        row = rec.row()
        print("%4d  %.4f  %+.1e  %+.1e  %+.1e  %.1e" % (
            row["k"], row["t"], row["u"], row["du"], row["dup"], row["Hprime"]))


def _summary_line(tag: str, outcome) -> str:
    res = outcome.final_residual_v
    res_txt = "n/a" if (res is None or math.isnan(res)) else "%.6e" % res
    return "%s: status=%s iterations=%d final_residual_v=%s" % (
        tag, outcome.status, len(outcome.trace), res_txt)


def run_atan(args) -> int:
    _require(args.h > 0, "--h", "must be positive")
    problem = ArctanProblem()
    config = BscConfig(step_bound=args.h, **_bsc_kwargs(args))
    u0 = StateVector(np.array([args.u0], dtype=float), problem.space)
    outcome = solve(problem, u0, config)
    echo = {
        "experiment": "atan-demo",
        "u0": args.u0,
        "step_bound": args.h,
        "low_factor": args.low_factor,
        "high_factor": args.high_factor,
        "smoothing": args.smoothing,
        "t0": args.t0,
        "residual_tol": args.residual_tol,
        "max_iterations": args.max_iterations,
        "seed": args.seed,
    }
    _write_outputs(outcome, echo, args, extended=False)
    if args.pretty:
        _print_pretty(outcome)
    print(_summary_line("atan-demo", outcome))
    return 0 if outcome.status == "converged" else 1


def _carrier_single(args, h_rel, output_path):
    problem = CarrierProblem(eps=args.eps, n_dof=args.n_dof, inner_tol=args.kappa)
    fields = {"step_bound": args.h} if args.h is not None else {"step_bound_rel": h_rel}
    config = BscConfig(**fields, **_bsc_kwargs(args))
    u0 = StateVector(problem.space.zeros(), problem.space)
    outcome = solve(problem, u0, config)
    echo = {
        "experiment": "carrier",
        "eps": args.eps,
        "n_dof": args.n_dof,
        "kappa": args.kappa,
        "h_rel": None if args.h is not None else h_rel,
        "step_bound": args.h,
        "low_factor": args.low_factor,
        "high_factor": args.high_factor,
        "smoothing": args.smoothing,
        "t0": args.t0,
        "residual_tol": args.residual_tol,
        "max_iterations": args.max_iterations,
        "seed": args.seed,
    }
    path = _write_outputs(outcome, echo, _with_output(args, output_path), extended=True)
    return outcome, path


def _with_output(args, path):
    if path is None:
        return args
    clone = argparse.Namespace(**vars(args))
    clone.output = path
    return clone


def _sweep_values(raw: str):
    body = raw.split("=", 1)[1] if "=" in raw else raw
    if "=" in raw and raw.split("=", 1)[0] not in ("h-rel", "h_rel"):
        raise ConfigError(f"invalid --sweep: unknown parameter {raw.split('=', 1)[0]!r}")
    tokens = [tok.strip() for tok in body.split(",") if tok.strip()]
    _require(len(tokens) > 0, "--sweep", "no values given")
    try:
        values = [float(tok) for tok in tokens]
    except ValueError:
        raise ConfigError(f"invalid --sweep: {body!r} is not a comma-separated float list")
    for v in values:
        _require(v > 0, "--sweep", "step bound factors must be positive")
    return tokens, values


def run_carrier(args) -> int:
    _require(args.eps > 0, "--eps", "must be positive")
    _require(args.n_dof >= 1, "--n-dof", "must be >= 1")
    _require(0.0 < args.kappa < 1.0, "--kappa", "must be in (0, 1)")
    if args.h is None:
        _require(args.h_rel > 0, "--h-rel", "must be positive")

    if args.sweep:
        _require(args.h is None, "--sweep", "cannot be combined with an absolute --h")
        tokens, values = _sweep_values(args.sweep)
        base = args.output or f"carrier_trace.{args.format}"
        stem, ext = os.path.splitext(base)
        paths = [f"{stem}_hrel{tok}{ext}" for tok in tokens]
        workers = min(_thread_budget(), len(values))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda pair: _carrier_single(args, pair[0], pair[1]),
                zip(values, paths)))
        code = 0
        for tok, (outcome, path) in zip(tokens, results):
            print(_summary_line(f"carrier[h_rel={tok}]", outcome))
            if outcome.status != "converged":
                code = 1
        return code

    outcome, _ = _carrier_single(args, args.h_rel, args.output)
    if args.pretty:
        _print_pretty(outcome)
    print(_summary_line("carrier", outcome))
    return 0 if outcome.status == "converged" else 1


def run_minsurf(args) -> int:
    _require(args.cells >= 2, "--cells", "must be >= 2")
    _require(args.p >= 1, "--p", "must be >= 1")
    _require(0.0 < args.inner_tol < 1.0, "--inner-tol", "must be in (0, 1)")
    definition = minimal_surface_1d(dirichlet=(args.a, args.b))
    mesh = Mesh1D.uniform(0.0, 1.0, args.cells)
    space = FeSpace1D(mesh, args.p, definition.dirichlet)
    problem = GalerkinProblem(definition, space, inner_tol=args.inner_tol)
    config = BscConfig(**_step_bound_fields(args), **_bsc_kwargs(args))
    outcome = solve(problem, problem.initial_state(), config)
    echo = {
        "experiment": "minsurf1d",
        "cells": args.cells,
        "p": args.p,
        "a": args.a,
        "b": args.b,
        "inner_tol": args.inner_tol,
        "h_rel": None if args.h is not None else args.h_rel,
        "step_bound": args.h,
        "low_factor": args.low_factor,
        "high_factor": args.high_factor,
        "smoothing": args.smoothing,
        "t0": args.t0,
        "residual_tol": args.residual_tol,
        "max_iterations": args.max_iterations,
        "seed": args.seed,
    }
    _write_outputs(outcome, echo, args, extended=True)
    if args.pretty:
        _print_pretty(outcome)
    print(_summary_line("minsurf1d", outcome))
    return 0 if outcome.status == "converged" else 1


def run_carrier_adaptive(args) -> int:
    _require(args.eps > 0, "--eps", "must be positive")
    _require(args.cells >= 2, "--cells", "must be >= 2")
    _require(args.p >= 1, "--p", "must be >= 1")
    _require(0.0 < args.kappa_target < 1.0, "--kappa-target", "must be in (0, 1)")
    _require(args.max_cells >= args.cells, "--max-cells", "must be >= --cells")
    definition = carrier_semilinear(args.eps)
    mesh = Mesh1D.uniform(-1.0, 1.0, args.cells)
    config = BscConfig(**_step_bound_fields(args), **_bsc_kwargs(args))
    policy = RefinementPolicy(kappa_target=args.kappa_target, max_cells=args.max_cells,
                              degree=args.p)
    outcome = adaptive_solve(definition, mesh, config, policy)
    echo = {
        "experiment": "carrier-adaptive",
        "eps": args.eps,
        "cells": args.cells,
        "p": args.p,
        "kappa_target": args.kappa_target,
        "max_cells": args.max_cells,
        "h_rel": None if args.h is not None else args.h_rel,
        "step_bound": args.h,
        "low_factor": args.low_factor,
        "high_factor": args.high_factor,
        "smoothing": args.smoothing,
        "t0": args.t0,
        "residual_tol": args.residual_tol,
        "max_iterations": args.max_iterations,
        "phase1_increment_tol": policy.phase1_increment_tol,
        "kappa_num_tol": policy.kappa_num_tol,
        "kappa_den_tol": policy.kappa_den_tol,
        "inner_tol": policy.inner_tol,
        "seed": args.seed,
    }
    _write_outputs(outcome, echo, args, extended=True, history=outcome.history)
    if args.pretty:
        _print_pretty(outcome)
    print(_summary_line("carrier-adaptive", outcome))
    ok = outcome.status in ("converged", "converged_on_finest")
    return 0 if ok else 1


def _add_common(sub, residual_tol, max_iterations, low_factor=0.1, t0=1.0):
    sub.add_argument("--output", help="trace file path (default <experiment>_trace.<fmt>)")
    sub.add_argument("--format", choices=("csv", "json"), default="csv")
    sub.add_argument("--pretty", action="store_true",
                     help="print the accepted rows in the two-digit table style")
    sub.add_argument("--seed", type=int, default=0,
                     help="seed echoed into outputs for randomized tooling")
    sub.add_argument("--max-iterations", type=int, default=max_iterations)
    sub.add_argument("--residual-tol", type=float, default=residual_tol)
    sub.add_argument("--t0", type=float, default=t0)
    sub.add_argument("--low-factor", type=float, default=low_factor)
    sub.add_argument("--high-factor", type=float, default=1.5)
    sub.add_argument("--smoothing", type=float, default=0.7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backstep",
        description="step-controlled Newton experiments with reproducible traces")
    subs = parser.add_subparsers(dest="experiment", required=True,
                                 metavar="{atan-demo,carrier,minsurf1d,carrier-adaptive}")

    atan = subs.add_parser("atan-demo", help="scalar arctan walk-through")
    atan.add_argument("--u0", type=float, default=2.0)
    atan.add_argument("--h", type=float, default=0.8, help="absolute step bound")
    _add_common(atan, residual_tol=1e-15, max_iterations=10)
    atan.set_defaults(runner=run_atan)

    carrier = subs.add_parser("carrier", help="Carrier problem on a fixed grid")
    carrier.add_argument("--eps", type=float, default=1e-3)
    carrier.add_argument("--n-dof", type=int, default=2047)
    carrier.add_argument("--kappa", type=float, default=1e-2,
                         help="inner relative tolerance = target contraction rate")
    carrier.add_argument("--h-rel", type=float, default=0.05,
                         help="step bound as a fraction of the first increment norm")
    carrier.add_argument("--h", type=float, default=None, help="absolute step bound")
    carrier.add_argument("--sweep", default=None,
                         help="run several step bound factors, e.g. h-rel=0.1,0.05,0.01")
    _add_common(carrier, residual_tol=1e-11, max_iterations=100, low_factor=0.05)
    carrier.set_defaults(runner=run_carrier)

    minsurf = subs.add_parser("minsurf1d", help="1-D minimal surface equation")
    minsurf.add_argument("--cells", type=int, default=32)
    minsurf.add_argument("--p", type=int, default=1, help="polynomial degree")
    minsurf.add_argument("--a", type=float, default=0.0, help="left boundary value")
    minsurf.add_argument("--b", type=float, default=1.0, help="right boundary value")
    minsurf.add_argument("--inner-tol", type=float, default=1e-3)
    minsurf.add_argument("--h-rel", type=float, default=1.0)
    minsurf.add_argument("--h", type=float, default=None, help="absolute step bound")
    _add_common(minsurf, residual_tol=1e-12, max_iterations=40)
    minsurf.set_defaults(runner=run_minsurf)

    adaptive = subs.add_parser("carrier-adaptive",
                               help="Carrier problem with rate-driven refinement")
    adaptive.add_argument("--eps", type=float, default=1e-2)
    adaptive.add_argument("--cells", type=int, default=32, help="initial cell count")
    adaptive.add_argument("--p", type=int, default=1, help="polynomial degree")
    adaptive.add_argument("--kappa-target", type=float, default=0.5)
    adaptive.add_argument("--max-cells", type=int, default=4096)
    adaptive.add_argument("--h-rel", type=float, default=0.05)
    adaptive.add_argument("--h", type=float, default=None, help="absolute step bound")
    _add_common(adaptive, residual_tol=1e-11, max_iterations=100, low_factor=0.05)
    adaptive.set_defaults(runner=run_carrier_adaptive)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.runner(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # configuration objects validate their own fields and name them
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
