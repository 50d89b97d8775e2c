"""Command-line entry point: ``biharm <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input, 2 an iterative solve did not
converge, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time

import numpy as np

from . import experiments as ex
from .assemble import assemble_system, default_penalties
from .mesh import MeshError, build_hierarchy, read_mesh, unit_hierarchy
from .patch import PatchError, build_all_patches, default_nm, patch_summary
from .recon import ReconstructionError
from .solver import SolverError, condition_number, generalized_condition

log = logging.getLogger("biharm")

EXIT_OK, EXIT_INPUT, EXIT_NOCONV, EXIT_INTERNAL = 0, 1, 2, 3
MAX_TESTED_DEGREE = 4
MAX_DEGREE = 6


class InputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        vals = [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"mesh sizes must be positive integers, got {text!r}")
    return vals


def _range(text):
    vals = _int_list(text)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"expected LO,HI with LO <= HI, got {text!r}")
    return vals


def _common(p, *, sizes=True):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--dim", type=int, choices=(2, 3), default=2)
    p.add_argument("--example", choices=("ex1", "ex2", "custom"), default=None,
                   help="manufactured case (default ex1 in 2D, ex2 in 3D)")
    p.add_argument("--mesh", help="mesh file for custom runs")
    p.add_argument("--m", type=int, default=2, help="reconstruction degree")
    if sizes:
        p.add_argument("--n", type=_int_list, default=[8, 16, 32],
                       help="comma-separated subdivisions per axis")
        p.add_argument("--refines", type=int, default=2,
                       help="refinements of a custom mesh")
    p.add_argument("--nm", type=int, default=None, help="patch size threshold N_m")
    p.add_argument("--mu1", type=float, default=None)
    p.add_argument("--mu2", type=float, default=None)
    p.add_argument("--seed", type=int, default=ex.DEFAULT_SEED)
    p.add_argument("--csv")
    p.add_argument("--json")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biharm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve and tabulate errors, rates and iteration counts")
    _common(p)
    p.add_argument("--solver", choices=ex.SOLVERS, default="pcg-mg1")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iters", type=int, default=3000)
    p.add_argument("--conditions", action="store_true", help="also compute condition numbers")
    p.add_argument("--export", help="directory for Matrix Market files of the finest system")

    p = sub.add_parser("condition", help="kappa(A_m) and kappa(A_L^-1 A_m)")
    _common(p)

    p = sub.add_parser("lambda-study", help="Lambda_m as a function of N_m")
    _common(p)
    p.add_argument("--nm-range", type=_range, default=None,
                   help="LO,HI (default 1.2..2.5 times dim P_m)")

    p = sub.add_parser("dmt-check", help="discrete Miranda-Talenti ratios")
    _common(p)
    p.add_argument("--trials", type=int, default=50)

    p = sub.add_parser("export", help="write A_m, M_m, A_L, b in Matrix Market format")
    _common(p)
    p.add_argument("--out", "--export", dest="out", required=False, default=None)

    p = sub.add_parser("mesh-info", help="mesh and patch statistics")
    _common(p)
    return parser


def _load_config(path) -> dict:
    out = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{lineno}: expected key=value")
                k, v = (t.strip() for t in line.split("=", 1))
                out[k.lstrip("-").replace("-", "_")] = v
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        bad = [k for k in cfg if k not in known or k == "config"]
        if bad:
            raise InputError(f"unknown config keys: {', '.join(sorted(bad))}")
        for k, v in cfg.items():
            if isinstance(known[k], argparse._StoreTrueAction):
                cfg[k] = v.lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


# -- helpers ------------------------------------------------------------------

def _validate(args):
    if args.m < 2 or args.m > MAX_DEGREE:
        raise InputError(f"--m must be between 2 and {MAX_DEGREE}")
    if args.m > MAX_TESTED_DEGREE:
        log.warning("degree m=%d is beyond the tested range 2..%d", args.m, MAX_TESTED_DEGREE)
    if args.example is None:
        args.example = "ex1" if args.dim == 2 else "ex2"
    if args.example == "ex1" and args.dim != 2:
        raise InputError("ex1 is two-dimensional; use --dim 2")
    if args.example == "ex2" and args.dim != 3:
        raise InputError("ex2 is three-dimensional; use --dim 3")
    if args.example == "custom" and not args.mesh:
        raise InputError("--example custom needs --mesh")
    if args.nm is not None and args.nm < args.dim + 1:
        raise InputError(f"--nm must be at least dim+1 = {args.dim + 1}")
    if getattr(args, "tol", 1.0) <= 0 or getattr(args, "max_iters", 1) < 1:
        raise InputError("--tol must be positive and --max-iters at least 1")


def _case(args):
    if args.example == "custom":
        return None
    return ex.CASES[args.example]()


def _hierarchies(args):
    """Yield ``(label n, MeshHierarchy)`` for every requested mesh."""
    if args.mesh:
        try:
            base = read_mesh(args.mesh)
        except (OSError, MeshError) as exc:
            raise InputError(str(exc)) from exc
        if base.dim != args.dim:
            raise InputError(f"mesh is {base.dim}D but --dim is {args.dim}")
        for k in range(args.refines + 1):
            yield 2 ** k, build_hierarchy(base, k)
    else:
        for n in args.n:
            yield n, unit_hierarchy(args.dim, n)


def _print_table(rows, out=None):
    if not rows:
        return
    out = sys.stdout if out is None else out
    cols = list(rows[0].keys())
    cells = [[_cell(r.get(c, "")) for c in cols] for r in rows]
    width = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    out.write("  ".join(c.rjust(w) for c, w in zip(cols, width)) + "\n")
    for row in cells:
        out.write("  ".join(v.rjust(w) for v, w in zip(row, width)) + "\n")


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)


def _finish(args, rows, t0, extra=None):
    _print_table(rows)
    if args.csv:
        # wall times are left out so that reruns give identical files
        ex.write_csv(args.csv, [{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    if args.json:
        cfg = {k: v for k, v in vars(args).items() if k not in ("csv", "json")}
        ex.write_json(args.json, ex.run_manifest(cfg, time.perf_counter() - t0, extra))


def _penalties(args):
    d1, d2 = default_penalties(args.m)
    return (d1 if args.mu1 is None else args.mu1), (d2 if args.mu2 is None else args.mu2)


def _rhs(case):
    if case is None:
        return (lambda x: np.ones(x.shape[:-1])), None
    return case.f, case.bc


# -- subcommands --------------------------------------------------------------

def cmd_solve(args):
    t0 = time.perf_counter()
    case = _case(args)
    mu1, mu2 = _penalties(args)
    f, bc = _rhs(case)
    rows, converged, last = [], True, None
    for n, hier in _hierarchies(args):
        t1 = time.perf_counter()
        mesh = hier.finest
        system = assemble_system(mesh, args.m, f, bc=bc, nm=args.nm, mu1=mu1, mu2=mu2)
        x, rep = ex.solve_system(system, args.solver, hierarchy=hier, tol=args.tol,
                                 max_iters=args.max_iters)
        row = {"n": n, "h": mesh.h, "n_p": system.n_p, "nm": system.recon.nm,
               "lambda_m": system.recon.stats.lambda_m,
               "iterations": rep.iterations if rep else 0,
               "converged": rep.converged if rep else True,
               "rel_residual": rep.relative_residual if rep else
               float(np.linalg.norm(system.A @ x - system.b) / max(np.linalg.norm(system.b), 1e-300))}
        if rep is not None and not rep.converged:
            converged = False
        if case is not None:
            row["l2_error"], row["energy_error"] = ex.measure_errors(case, system.recon,
                                                                     system.coefficients(x))
        if args.conditions:
            row["kappa_A"] = condition_number(system.A)
            row["kappa_AL"] = generalized_condition(system.A, system.AL)
        row["seconds"] = time.perf_counter() - t1
        rows.append(row)
        last = system
    if case is not None and len(rows) > 1:
        for key in ("l2_error", "energy_error"):
            prev = None
            for r in rows:
                r[key.replace("error", "rate")] = (math.log(prev[key] / r[key]) / math.log(prev["h"] / r["h"])
                                                   if prev else math.nan)
                prev = r
    if args.export and last is not None:
        last.export(args.export)
    _finish(args, rows, t0)
    return EXIT_OK if converged else EXIT_NOCONV


def cmd_condition(args):
    t0 = time.perf_counter()
    case = _case(args)
    mu1, mu2 = _penalties(args)
    f, bc = _rhs(case)
    rows = []
    for n, hier in _hierarchies(args):
        system = assemble_system(hier.finest, args.m, f, bc=bc, nm=args.nm, mu1=mu1, mu2=mu2)
        rows.append({"n": n, "h": hier.finest.h, "n_p": system.n_p,
                     "kappa_A": condition_number(system.A),
                     "kappa_AL": generalized_condition(system.A, system.AL)})
    _finish(args, rows, t0)
    return EXIT_OK


def cmd_lambda(args):
    t0 = time.perf_counter()
    lo, hi = args.nm_range if args.nm_range else (None, None)
    sweep = list(range(lo, hi + 1)) if lo is not None else ex.nm_sweep(args.dim, args.m)
    rows = []
    for n, hier in _hierarchies(args):
        for r in ex.run_lambda_study(hier.finest, args.m, sweep):
            rows.append({"n": n, **r})
    _finish(args, rows, t0)
    return EXIT_OK


def cmd_dmt(args):
    t0 = time.perf_counter()
    if args.trials < 1:
        raise InputError("--trials must be at least 1")
    rows = []
    for n, hier in _hierarchies(args):
        rows.append({"n": n, "h": hier.finest.h,
                     "max_ratio": ex.run_dmt_check(hier.finest, args.m, args.trials, args.seed)})
    _finish(args, rows, t0, {"trials": args.trials})
    return EXIT_OK


def cmd_export(args):
    t0 = time.perf_counter()
    if not args.out:
        raise InputError("export needs --out DIR")
    case = _case(args)
    mu1, mu2 = _penalties(args)
    f, bc = _rhs(case)
    rows = []
    for n, hier in _hierarchies(args):
        system = assemble_system(hier.finest, args.m, f, bc=bc, nm=args.nm, mu1=mu1, mu2=mu2)
        out = args.out if len(getattr(args, "n", [n])) == 1 and not args.mesh \
            else os.path.join(args.out, f"n{n}")
        paths = system.export(out)
        rows.append({"n": n, "n_p": system.n_p, "directory": out, "files": len(paths)})
    _finish(args, rows, t0)
    return EXIT_OK


def cmd_mesh_info(args):
    t0 = time.perf_counter()
    nm = args.nm if args.nm is not None else default_nm(args.dim, args.m)
    rows = []
    for n, hier in _hierarchies(args):
        mesh = hier.finest
        row = {"n": n, "levels": hier.num_levels, "vertices": mesh.num_vertices,
               "elements": mesh.num_elements, "faces": mesh.num_faces,
               "interior_nodes": len(mesh.interior_nodes), "h": mesh.h,
               "quasi_uniformity": mesh.quasi_uniformity, "nm": nm}
        try:
            row.update(patch_summary(build_all_patches(mesh, nm)))
        except RuntimeError as exc:
            row["patch_error"] = str(exc)
        rows.append(row)
    _finish(args, rows, t0)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "condition": cmd_condition, "lambda-study": cmd_lambda,
            "dmt-check": cmd_dmt, "export": cmd_export, "mesh-info": cmd_mesh_info}


def _limit_threads():
    val = os.environ.get("BIHARM_THREADS")
    if not val:
        return None
    try:
        k = int(val)
    except ValueError:
        raise InputError(f"BIHARM_THREADS must be an integer, got {val!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(k, 1))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    except InputError as exc:
        print(f"biharm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        limiter = _limit_threads()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except InputError as exc:
        print(f"biharm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ReconstructionError, PatchError, MeshError) as exc:
        print(f"biharm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"biharm: solver error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"biharm: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
