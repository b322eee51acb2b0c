"""Command-line front end.

Exit codes: 0 success, 1 usage or I/O error, 2 infeasible (condition
violation or no solvability bracket).
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .chain import make_rng, sample_path, write_path_csv
from .errors import ConditionViolation, HinfError, NoBracket, ScenarioError, ValidationError
from .gains import synthesize
from .model import EXAMPLE_SCENARIO, load_scenario
from .riccati import solve_all, write_certificates_csv
from .sim import outcome_policies, simulate_path
from .svg import line_plot

OUT_ENV = "HINFSWITCH_OUT"
EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2


# ------------------------------------------------------------------ helpers

def _out_dir(args, sub=None):
    base = Path(args.out or os.environ.get(OUT_ENV) or "hinfswitch_out")
    path = base / sub if sub else base
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args, gamma=None):
    g = args.gamma if gamma is None else gamma
    return load_scenario(args.scenario, gamma=g)


def _solve(model, args):
    sol = solve_all(model, step=args.ds)
    return sol, synthesize(sol, model)


def _write_solution(sol, gains, out, plot):
    sol.to_csv(out / "riccati.csv")
    gains.to_csv(out / "gains.csv")
    write_certificates_csv(sol, out / "certificates.csv")
    if not plot:
        return
    s = sol.grid.nodes
    D, n, m = sol.P.shape[1], sol.P.shape[2], gains.m
    nv = gains.ThetaHat.shape[2] - m
    curves = []
    for i in range(D):
        for a in range(n):
            for b in range(a, n):
                idx = f"[{a + 1}{b + 1}]" if n > 1 else ""
                curves.append((f"Pi{idx} regime {i + 1}", s, sol.Pi[:, i, a, b]))
                curves.append((f"P{idx} regime {i + 1}", s, sol.P[:, i, a, b]))
    line_plot(out / "riccati.svg", curves, "Riccati solutions", "s", "value")
    for name, arr, rows in (("ThetaHat1", gains.ThetaHat1, m), ("ThetaHat2", gains.ThetaHat2, nv),
                            ("ThetaTilde2", gains.ThetaTilde2, nv)):
        curves = [(f"{name}[{a + 1}{b + 1}] regime {i + 1}" if arr.shape[2] * n > 1
                   else f"regime {i + 1}", s, arr[:, i, a, b])
                  for i in range(D) for a in range(rows) for b in range(n)]
        line_plot(out / f"gains_{name}.svg", curves, name, "s", "gain")


def _sample_path(model, sol, gains, seed, out, plot, tag=""):
    u, v = outcome_policies(gains)
    chain = sample_path(model.generator, model.initial_regime, sol.grid.t0, sol.grid.T,
                        make_rng(seed, 0))
    path = simulate_path(model, u, v, sol.grid, chain, seed=seed)
    path.to_csv(out / f"path{tag}.csv")
    write_path_csv(chain, out / f"chain{tag}.csv")
    if plot:
        line_plot(out / f"states{tag}.svg",
                  [("x", path.times, path.x[:, 0]), ("xhat", path.times, path.xhat[:, 0]),
                   ("xtilde", path.times, path.xtilde[:, 0])], "state sample path", "s", "")
        line_plot(out / f"policies{tag}.svg",
                  [("u", path.times, path.u[:, 0]), ("v", path.times, path.v[:, 0])],
                  "policy sample path", "s", "")
        line_plot(out / f"regime{tag}.svg",
                  [("regime", path.times, path.regime + 1)], "regime", "s", "")
    return path


def _write_report(report, out, name="report"):
    (out / f"{name}.txt").write_text(report.to_text())
    print(report.table(), end="")


# ----------------------------------------------------------------- commands

def cmd_solve(args):
    model = _load(args)
    sol, gains = _solve(model, args)
    out = _out_dir(args)
    _write_solution(sol, gains, out, args.plot)
    print(f"solved on {sol.grid.K} steps; min margin {sol.min_margin():.4g}; "
          f"P(t, i0) = {sol.P[0, model.initial_regime].tolist()}")
    print(f"wrote riccati.csv, gains.csv, certificates.csv to {out}")
    return EXIT_OK


def cmd_simulate(args):
    model = _load(args)
    sol, gains = _solve(model, args)
    out = _out_dir(args)
    _sample_path(model, sol, gains, args.seed, out, args.plot)
    u, v = outcome_policies(gains)
    est = ev.cost_mc(model, u, v, model.gamma, args.paths, args.seed, grid=sol.grid)
    print(f"cost under saddle policies: {est}")
    print(f"wrote path.csv, chain.csv to {out}")
    return EXIT_OK


def _evaluate_report(model, sol, gains, args):
    u, v = outcome_policies(gains)
    rep = ev.EvalReport(model.gamma, value_formula=ev.value_formula(sol, model))
    rep.mc_under_saddle = ev.cost_mc(model, u, v, model.gamma, args.paths, args.seed,
                                     grid=sol.grid)
    return rep


def cmd_evaluate(args):
    model = _load(args)
    sol, gains = _solve(model, args)
    _write_report(_evaluate_report(model, sol, gains, args), _out_dir(args))
    return EXIT_OK


def cmd_saddle_check(args):
    model = _load(args)
    sol, gains = _solve(model, args)
    perts = ev.default_perturbations(tuple(args.eps))
    rep = ev.EvalReport(model.gamma)
    rep.saddle_checks = ev.saddle_check(model, gains, perts, args.paths, args.seed)
    _write_report(rep, _out_dir(args))
    return EXIT_OK


def cmd_hinf_check(args):
    model = _load(args)
    rep = ev.EvalReport(model.gamma)
    rep.hinf = ev.hinf_ratio(model, n_paths=args.paths, seed=args.seed, step=args.ds)
    _write_report(rep, _out_dir(args))
    return EXIT_OK


def cmd_gamma_star(args):
    model = _load(args)
    out = _out_dir(args)
    if args.sweep:
        gammas = np.linspace(args.lo, args.hi, args.sweep)
        rows = ev.gamma_sweep(model, gammas, step=args.ds)
        ev.write_sweep_csv(rows, out / "gamma_sweep.csv")
        for r in rows:
            print(f"  gamma {r.gamma:8.4f}  {'solvable' if r.solvable else '-':<9} "
                  f"margin {r.min_margin:+.4e}")
    rep = ev.EvalReport(model.gamma)
    rep.gamma_star_bracket = ev.gamma_star(model, args.lo, args.hi, args.tol, step=args.ds)
    _write_report(rep, out)
    return EXIT_OK


def cmd_example(args):
    out = _out_dir(args)
    solved = {}
    for gamma in (1.0, 2.0):
        model = load_scenario(args.scenario or EXAMPLE_SCENARIO, gamma=gamma)
        sub = _out_dir(args, f"gamma_{gamma:g}")
        sol, gains = _solve(model, args)
        solved[gamma] = gains
        _write_solution(sol, gains, sub, args.plot)
        _sample_path(model, sol, gains, args.seed, sub, args.plot)
        rep = _evaluate_report(model, sol, gains, args)
        rep.hinf = ev.hinf_ratio(model, n_paths=args.paths, seed=args.seed, step=args.ds)
        _write_report(rep, sub)
    if args.plot:
        for name in ("ThetaHat1", "ThetaHat2", "ThetaTilde2"):
            curves = [(f"gamma={gamma:g} regime {i + 1}", g.grid.nodes,
                       getattr(g, name)[:, i, 0, 0])
                      for gamma, g in solved.items() for i in range(g.ThetaHat.shape[1])]
            line_plot(out / f"compare_{name}.svg", curves, f"{name} at gamma = 1 and 2",
                      "s", "gain")
    return EXIT_OK


# ------------------------------------------------------------------- parser

COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "saddle-check": cmd_saddle_check,
    "hinf-check": cmd_hinf_check,
    "gamma-star": cmd_gamma_star,
    "example": cmd_example,
}


def _positive(kind):
    def parse(text):
        val = kind(text)
        if not val > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="hinfswitch",
                                description="Regime-switching stochastic H-infinity games")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "example":
            sp.add_argument("scenario", nargs="?", default=None,
                            help="scenario file (defaults to the bundled example)")
        else:
            sp.add_argument("scenario", help="scenario TOML file or bundled name")
        sp.add_argument("--gamma", type=_positive(float), default=None,
                        help="override the attenuation level")
        sp.add_argument("--ds", type=_positive(float), default=1e-3, help="grid step")
        default_paths = 50_000 if name == "saddle-check" else 10_000
        sp.add_argument("--paths", type=_positive(int), default=default_paths)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None,
                        help=f"output directory (default ${OUT_ENV} or ./hinfswitch_out)")
        sp.add_argument("--plot", action="store_true", help="also write SVG plots")
        sp.add_argument("--threads", type=_positive(int), default=None,
                        help="cap on BLAS threads")
        if name == "gamma-star":
            sp.add_argument("--lo", type=_positive(float), default=0.01)
            sp.add_argument("--hi", type=_positive(float), default=3.0)
            sp.add_argument("--tol", type=_positive(float), default=1e-3)
            sp.add_argument("--sweep", type=int, default=0,
                            help="also tabulate solvability on this many points of [lo, hi]")
        if name == "saddle-check":
            sp.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.25])
    return p


def _thread_cap(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        with _thread_cap(args.threads):
            return COMMANDS[args.command](args)
    except ConditionViolation as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        print(f"  s = {exc.time:.6g}, regime = {exc.regime + 1}, condition = {exc.condition},"
              f" margin = {exc.margin:.6g}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NoBracket as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ScenarioError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HinfError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
