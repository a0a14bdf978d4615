"""Command-line front end: ``imexpeer {verify,integrate,stability,convergence,search}``.

Every subcommand prints a short human summary and writes CSV files (numbers
at 17 significant digits) to ``--out`` or, if unset, to the directory named
by ``IMEXPEER_OUT``.  Exit codes: 0 success, 1 domain failure, 2 usage or
I/O error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments, integrator, methods, search, stability
from .tableau import TableauError, certify, serialize

OUT_ENV = "IMEXPEER_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def g17(x) -> str:
    return f"{float(x):.17g}"


def _out_dir(args, required: bool = True) -> Path | None:
    path = args.out or os.environ.get(OUT_ENV)
    if path is None:
        if not required:
            return None
        path = "."
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _threads(args) -> int:
    return args.threads if args.threads else search.default_workers()


def _load(name: str):
    try:
        return methods.resolve(name)
    except (methods.UnknownMethodError, TableauError, OSError) as exc:
        raise UsageError(str(exc)) from exc


# -- subcommands ---------------------------------------------------------------

def cmd_verify(args) -> int:
    tab = _load(args.method)
    report = certify(tab)
    rows = report.rows()
    width = max(len(k) for k, _ in rows)
    for k, val in rows:
        print(f"{k:<{width}}  {val}")
    for w in report.warnings:
        print(f"warning: {w}")
    out = _out_dir(args, required=False)
    if out is not None:
        fh, w = _writer(out / f"verify_{tab.label}.csv")
        with fh:
            w.writerow(["quantity", "value"])
            w.writerows(rows)
    if not report.passed:
        print("FAILED: " + ", ".join(report.failures()))
        return EXIT_FAIL
    return EXIT_OK


def _problem(args):
    if args.problem == "prothero-robinson":
        return experiments.prothero_robinson(args.t_end or 5.0)
    if args.problem == "advection-reaction":
        return experiments.advection_reaction(args.m, args.t_end or 1.0)
    raise UsageError(f"unknown problem {args.problem!r}")


def cmd_integrate(args) -> int:
    tab = _load(args.method)
    problem = _problem(args)
    out = _out_dir(args)
    trace = out / args.trace if args.trace else None
    options = integrator.NewtonOptions(jacobian_reuse=args.problem == "advection-reaction")
    try:
        result = integrator.integrate(tab, problem, args.dt, mode=args.mode, options=options, trace=trace)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    except integrator.IntegrationError as exc:
        print(f"integration failed: {exc}")
        return EXIT_FAIL
    y = result.y
    err = None
    if problem.exact is not None:
        err = experiments.scaled_max_error(y, problem.exact(result.t))
    fh, w = _writer(out / f"integrate_{tab.label}_{args.problem}.csv")
    with fh:
        w.writerow(["index", "t", "y"])
        for i, yi in enumerate(y):
            w.writerow([i, g17(result.t), g17(yi)])
    print(f"{tab.label} on {problem.name}: dt={g17(args.dt)} steps={result.steps} "
          f"newton_iterations={result.newton_iterations} t={g17(result.t)}")
    if err is not None:
        print(f"error (scaled max norm) = {err:.6e}")
    if not np.all(np.isfinite(y)):
        return EXIT_FAIL
    return EXIT_OK


def cmd_stability(args) -> int:
    tabs = [_load(m) for m in args.method]
    scan = stability.StabilityScan(alpha=args.alpha, nx=args.nx, ny=args.ny)

    def one(tab):
        sa = stability.scan_region(tab, scan, "alpha")
        se = stability.scan_region(tab, scan, "explicit")
        ok, _, _ = stability.is_a_stable(tab)
        return tab, sa, se, ok

    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        rows = list(pool.map(one, tabs))
    out = _out_dir(args)
    from .tableau import error_constants, rho_r_inv_q

    fh, w = _writer(out / "stability.csv")
    with fh:
        w.writerow(["method", "alpha", "a_stable", "area_alpha", "x_max", "rho_r_inv_q",
                    "area_e", "y_max", "c_im", "c_ex"])
        for tab, sa, se, ok in rows:
            c_im, c_ex = error_constants(tab)
            w.writerow([tab.label, g17(args.alpha), str(ok).lower(), g17(sa.area), g17(sa.x_max),
                        g17(rho_r_inv_q(tab)), g17(se.area), g17(se.y_max), g17(c_im), g17(c_ex)])
            print(f"{tab.label}: A-stable={ok} |S_alpha|={sa.area:.4f} x_max={sa.x_max:.4f} "
                  f"|S_E|={se.area:.4f} y_max={se.y_max:.4f}")
    if args.grid:
        for tab, sa, se, _ in rows:
            stability.write_grid_csv(sa, out / f"grid_alpha_{tab.label}.csv")
            stability.write_grid_csv(se, out / f"grid_explicit_{tab.label}.csv")
    return EXIT_OK if all(ok for *_, ok in rows) else EXIT_FAIL


def cmd_convergence(args) -> int:
    tabs = [_load(m) for m in args.method]
    steps = args.steps or None
    try:
        results = experiments.run_experiment(args.experiment, tabs, steps, m=args.m,
                                             workers=_threads(args))
    except experiments.IntegrationError as exc:
        print(f"reference computation failed: {exc}")
        return EXIT_FAIL
    out = _out_dir(args)
    experiments.write_results_csv(results, out / f"convergence_{args.experiment}.csv")
    status = EXIT_OK
    for r in results:
        order = "n/a" if r.fitted_order is None else f"{r.fitted_order:.3f}"
        print(f"{r.method}: fitted order {order}, failures {sum(r.failed)}/{len(r.failed)}")
        if r.fitted_order is None:
            status = EXIT_FAIL
    return status


def cmd_search(args) -> int:
    spec = search.preset(args.preset or f"s{args.stages}")
    if spec.s != args.stages:
        raise UsageError(f"preset {args.preset!r} is for s={spec.s}, not s={args.stages}")
    changes = {"seed": args.seed, "workers": _threads(args)}
    if args.multistart is not None:
        changes["multistart"] = args.multistart
    if args.max_evals is not None:
        changes["max_evals"] = args.max_evals
    if args.near:
        changes["start_near"] = _load(args.near)
    try:
        spec = replace(spec, **changes)
    except search.SearchError as exc:
        raise UsageError(str(exc)) from exc
    result = search.run_search(spec)
    out = _out_dir(args)
    fh, w = _writer(out / f"search_s{spec.s}_seed{spec.seed}.csv")
    with fh:
        w.writerow(["label", "area_alpha", "area_e", "rho_r_inv_q", "c_im", "c_ex",
                    "superconv_implicit", "superconv_explicit", "a_stable"])
        for cand in result.candidates:
            rep = cand.report
            w.writerow([cand.tableau.label, g17(cand.area_alpha), g17(cand.area_e), g17(rep.rho_r_inv_q),
                        g17(rep.c_im), g17(rep.c_ex), g17(rep.superconv_implicit),
                        g17(rep.superconv_explicit), str(rep.a_stable).lower()])
            (out / f"{cand.tableau.label}.tab").write_text(serialize(cand.tableau))
    print(f"{len(result.candidates)} candidate(s) after {result.evals} objective evaluations")
    for d in result.diagnostics:
        print(f"  {d}")
    return EXIT_OK if result.candidates else EXIT_FAIL


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imexpeer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=False):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        if threads:
            sp.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")

    sp = sub.add_parser("verify", help="certify a tableau")
    sp.add_argument("--method", required=True, help="builtin name or tableau file")
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("integrate", help="integrate a benchmark problem")
    sp.add_argument("--method", required=True)
    sp.add_argument("--problem", choices=experiments.EXPERIMENTS, default="prothero-robinson")
    sp.add_argument("--dt", type=float, required=True)
    sp.add_argument("--mode", choices=integrator.MODES, default="imex")
    sp.add_argument("--m", type=int, default=48, help="grid size for advection-reaction")
    sp.add_argument("--t-end", type=float, default=None)
    sp.add_argument("--trace", help="per-step CSV file name inside the output directory")
    common(sp)
    sp.set_defaults(func=cmd_integrate)

    sp = sub.add_parser("stability", help="stability regions and summary table")
    sp.add_argument("--method", nargs="+", default=list(methods.BUILTIN_NAMES))
    sp.add_argument("--alpha", type=float, default=90.0)
    sp.add_argument("--nx", type=int, default=400)
    sp.add_argument("--ny", type=int, default=400)
    sp.add_argument("--grid", action="store_true", help="also write membership grids")
    common(sp, threads=True)
    sp.set_defaults(func=cmd_stability)

    sp = sub.add_parser("convergence", help="convergence experiment")
    sp.add_argument("--experiment", choices=experiments.EXPERIMENTS, required=True)
    sp.add_argument("--method", nargs="+", default=list(methods.BUILTIN_NAMES))
    sp.add_argument("--steps", type=float, nargs="+")
    sp.add_argument("--m", type=int, default=48)
    common(sp, threads=True)
    sp.set_defaults(func=cmd_convergence)

    sp = sub.add_parser("search", help="search for new methods")
    sp.add_argument("--stages", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--preset")
    sp.add_argument("--multistart", type=int)
    sp.add_argument("--max-evals", type=int)
    sp.add_argument("--near", help="start near this method instead of random points")
    common(sp, threads=True)
    sp.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, search.SearchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
