"""Manufactured solutions, error measurement and the study drivers behind the CLI."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy
import scipy.sparse.linalg as spla

from . import __version__
from .assemble import BoundaryData, DGForms, assemble_AL, assemble_system, default_penalties
from .mesh import unit_hierarchy
from .patch import build_all_patches
from .polyspace import dim_poly, orthonormalize
from .recon import ReconstructionError, global_recon_operator, lambda_constants
from .solver import (SolverError, build_mg, cg, condition_number, direct_preconditioner,
                     generalized_condition, pcg)

log = logging.getLogger(__name__)

SOLVERS = ("direct", "cg", "pcg-al", "pcg-mg1", "pcg-mg2")
DEFAULT_SEED = 42
PI = np.pi


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact solution with closed-form derivatives and the matching load.

    All callables take points of shape (..., dim).  ``bc`` is ``None`` when the
    clamped data vanish identically.
    """
    name: str
    dim: int
    u: Callable
    grad: Callable
    hess: Callable
    laplacian: Callable
    f: Callable
    bc: BoundaryData | None = None

    @property
    def boundary_data(self) -> BoundaryData:
        return self.bc if self.bc is not None else BoundaryData.zero()


def case_example1() -> ManufacturedCase:
    """``u = sin^2(pi x) sin^2(pi y)`` on the unit square, homogeneous clamped data."""
    s, c = np.sin, np.cos

    def u(x):
        return s(PI * x[..., 0]) ** 2 * s(PI * x[..., 1]) ** 2

    def grad(x):
        a, b = PI * x[..., 0], PI * x[..., 1]
        return np.stack([PI * s(2 * a) * s(b) ** 2, PI * s(a) ** 2 * s(2 * b)], axis=-1)

    def hess(x):
        a, b = PI * x[..., 0], PI * x[..., 1]
        hxx = 2 * PI ** 2 * c(2 * a) * s(b) ** 2
        hyy = 2 * PI ** 2 * s(a) ** 2 * c(2 * b)
        hxy = PI ** 2 * s(2 * a) * s(2 * b)
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

    def lap(x):
        a, b = PI * x[..., 0], PI * x[..., 1]
        return 2 * PI ** 2 * (c(2 * a) * s(b) ** 2 + s(a) ** 2 * c(2 * b))

    def f(x):
        ca, cb = c(2 * PI * x[..., 0]), c(2 * PI * x[..., 1])
        return 4 * PI ** 4 * (4 * ca * cb - ca - cb)

    return ManufacturedCase("ex1", 2, u, grad, hess, lap, f, None)


def case_example2() -> ManufacturedCase:
    """``u = sin(pi x) sin(pi y) sin(pi z)`` on the unit cube.

    ``u`` vanishes on the boundary but its normal derivative does not, so the
    inhomogeneous load is exercised.
    """
    s, c = np.sin, np.cos

    def u(x):
        return s(PI * x[..., 0]) * s(PI * x[..., 1]) * s(PI * x[..., 2])

    def grad(x):
        sx, sy, sz = (s(PI * x[..., i]) for i in range(3))
        cx, cy, cz = (c(PI * x[..., i]) for i in range(3))
        return PI * np.stack([cx * sy * sz, sx * cy * sz, sx * sy * cz], axis=-1)

    def hess(x):
        sv = [s(PI * x[..., i]) for i in range(3)]
        cv = [c(PI * x[..., i]) for i in range(3)]
        rows = []
        for i in range(3):
            row = []
            for j in range(3):
                if i == j:
                    row.append(-PI ** 2 * sv[0] * sv[1] * sv[2])
                else:
                    k = 3 - i - j
                    row.append(PI ** 2 * cv[i] * cv[j] * sv[k])
            rows.append(np.stack(row, -1))
        return np.stack(rows, -2)

    def lap(x):
        return -3 * PI ** 2 * u(x)

    def f(x):
        return 9 * PI ** 4 * u(x)

    return ManufacturedCase("ex2", 3, u, grad, hess, lap, f,
                            BoundaryData.from_solution(u, grad))


CASES = {"ex1": case_example1, "ex2": case_example2}


def fd_biharmonic(u, x, step: float = 1e-3) -> np.ndarray:
    """Finite-difference ``Delta^2 u`` at points ``x`` (n, dim) with 5-point stencils.

    Evaluated in extended precision where the platform has it: the stencil
    divides by ``step^4``, so double-precision rounding in ``u`` alone would
    be amplified to about 1e-5 relative at ``step = 1e-3`` in 3D.
    """
    ld = np.longdouble
    x = np.atleast_2d(np.asarray(x, dtype=ld))
    d = x.shape[1]
    step = ld(step)
    offs = np.arange(-2, 3)
    w4 = np.array([1, -4, 6, -4, 1], dtype=ld) / step ** 4
    w2 = np.array([-1, 16, -30, 16, -1], dtype=ld) / (12 * step ** 2)
    out = np.zeros(len(x), dtype=ld)
    eye = np.eye(d, dtype=ld)
    for i in range(d):
        for a, wa in zip(offs, w4):
            out += wa * u(x + a * step * eye[i])
    for i in range(d):
        for j in range(i + 1, d):
            for a, wa in zip(offs, w2):
                for b, wb in zip(offs, w2):
                    out += 2 * wa * wb * u(x + a * step * eye[i] + b * step * eye[j])
    return out.astype(float)


def check_load(case: ManufacturedCase, npts: int = 100, seed: int = DEFAULT_SEED,
               step: float = 1e-3) -> float:
    """Max deviation of ``f`` from the finite-difference biharmonic of ``u``, relative to max |f|."""
    rng = np.random.default_rng(seed)
    x = 0.05 + 0.9 * rng.random((npts, case.dim))
    exact = case.f(x)
    return float(np.max(np.abs(fd_biharmonic(case.u, x, step) - exact)) / np.max(np.abs(exact)))


# -- errors -------------------------------------------------------------------

def measure_errors(case: ManufacturedCase, recon, coeffs, forms: DGForms | None = None):
    """L2 and energy errors of the broken function with coefficients ``coeffs``.

    Quadrature is exact to degree ``2m + 4``.  The energy error has the
    Laplacian part and the jump terms of ``u_h`` (boundary jumps are taken
    against the clamped data of the exact solution).
    """
    m = recon.degree
    if forms is None or forms.quad_degree < 2 * m + 4:
        forms = DGForms(recon.mesh, recon.basis, 2 * m + 4)
    basis = recon.basis
    c = np.asarray(coeffs).reshape(-1, basis.size)
    pts, w = forms.vol_points, forms.vol_weights
    elems = forms.elements
    uh = basis.eval_coefficients(c, elems, pts)
    lh = basis.eval_coefficients(c, elems, pts, "laplacian")
    l2 = math.sqrt(float((w * (uh - case.u(pts)) ** 2).sum()))
    t = forms.norm_terms(c, bc=case.boundary_data)
    lap = float((w * (lh - case.laplacian(pts)) ** 2).sum())
    energy = math.sqrt(lap + t["jump0"] + t["jump1"])
    return l2, energy


def exact_l2_norm(case: ManufacturedCase, n: int = 8, degree: int = 16) -> float:
    """``||u||_{L2}`` by element quadrature on a uniform mesh (an independent check)."""
    from .mesh import build_unit_mesh
    from .polyspace import simplex_quadrature
    mesh = build_unit_mesh(case.dim, n)
    pts, w = simplex_quadrature(case.dim, degree).map_to(mesh.element_points)
    return math.sqrt(float((w * case.u(pts) ** 2).sum()))


# -- solving ------------------------------------------------------------------

def solve_system(system, solver: str = "pcg-mg1", *, hierarchy=None, tol: float = 1e-9,
                 max_iters: int = 3000):
    """Solve ``A_m x = b`` with one of :data:`SOLVERS`.

    Returns ``(x, report)``; ``report`` is ``None`` for the direct solver.
    Multigrid solvers need the mesh ``hierarchy`` whose finest level is the
    system mesh.
    """
    A, b = system.A, system.b
    if solver == "direct":
        return spla.splu(A.tocsc()).solve(b), None
    if solver == "cg":
        return cg(A, b, tol=tol, max_iters=max_iters)
    if solver == "pcg-al":
        return pcg(A, b, direct_preconditioner(system.AL), tol=tol, max_iters=max_iters)
    if solver in ("pcg-mg1", "pcg-mg2"):
        if hierarchy is None:
            raise ValueError("multigrid preconditioning needs a mesh hierarchy")
        if hierarchy.num_levels < 2:
            pre = direct_preconditioner(system.AL)
        else:
            mg = build_mg("I" if solver == "pcg-mg1" else "II", hierarchy, assemble_AL)
            pre = mg.preconditioner()
        return pcg(A, b, pre, tol=tol, max_iters=max_iters)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


# -- convergence tables -------------------------------------------------------

@dataclass
class ConvergenceRow:
    n: int
    h: float
    n_p: int
    nm: int
    lambda_m: float
    l2_error: float = math.nan
    energy_error: float = math.nan
    kappa_A: float = math.nan
    kappa_AL: float = math.nan
    iterations: dict = field(default_factory=dict)
    seconds: float = math.nan
    error: str = ""


@dataclass
class ConvergenceTable:
    case: str
    m: int
    mu1: float
    mu2: float
    rows: list

    def rates(self, key: str) -> list:
        """``log2(e(h) / e(h/2))`` between consecutive rows."""
        vals = [getattr(r, key) for r in self.rows]
        hs = [r.h for r in self.rows]
        return [math.log(a / b) / math.log(ha / hb) if a > 0 and b > 0 else math.nan
                for a, b, ha, hb in zip(vals, vals[1:], hs, hs[1:])]

    def fitted_rate(self, key: str) -> float:
        """Least-squares slope of ``log e`` against ``log h``."""
        h = np.array([r.h for r in self.rows])
        e = np.array([getattr(r, key) for r in self.rows])
        ok = np.isfinite(e) & (e > 0)
        if ok.sum() < 2:
            return math.nan
        return float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0])

    def solvers(self) -> list:
        names = []
        for r in self.rows:
            for k in r.iterations:
                if k not in names:
                    names.append(k)
        return names

    def to_rows(self) -> list[dict]:
        solvers = self.solvers()
        l2r = [math.nan] + self.rates("l2_error")
        enr = [math.nan] + self.rates("energy_error")
        out = []
        for r, a, b in zip(self.rows, l2r, enr):
            row = {"h": r.h, "n": r.n, "n_p": r.n_p, "nm": r.nm, "lambda_m": r.lambda_m,
                   "l2_error": r.l2_error, "l2_rate": a,
                   "energy_error": r.energy_error, "energy_rate": b,
                   "kappa_A": r.kappa_A, "kappa_AL": r.kappa_AL}
            for s in solvers:
                row[f"iters_{s}"] = r.iterations.get(s, "")
            row["seconds"] = r.seconds
            row["error"] = r.error
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        write_csv(path, self.to_rows())


def write_csv(path, rows: list[dict]) -> None:
    """Deterministic CSV: fixed column order, floats with 17 significant digits."""
    if not rows:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    cols = list(rows[0].keys())
    for r in rows[1:]:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r.get(k, "")) for k in cols])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.17g}"
    return v


def run_convergence_study(case: ManufacturedCase, m: int, ns, *, solvers=("pcg-mg1",),
                          conditions: bool = True, nm: int | None = None,
                          mu1: float | None = None, mu2: float | None = None,
                          tol: float = 1e-9, max_iters: int = 3000,
                          condition_limit: int = 20000) -> ConvergenceTable:
    """Solve ``case`` with degree ``m`` on ``build_unit_mesh(dim, n)``-sized meshes.

    The first solver in ``solvers`` provides the solution used for the
    errors; every solver's iteration count is recorded.  Failures are
    recorded in the row and the study continues.
    """
    ns = sorted(int(n) for n in ns)
    if len(ns) < 1:
        raise ValueError("need at least one mesh size")
    d1, d2 = default_penalties(m)
    mu1 = d1 if mu1 is None else mu1
    mu2 = d2 if mu2 is None else mu2
    rows = []
    for n in ns:
        t0 = time.perf_counter()
        row = ConvergenceRow(n=n, h=1.0 / n, n_p=0, nm=0, lambda_m=math.nan)
        try:
            hier = unit_hierarchy(case.dim, n)
            mesh = hier.finest
            system = assemble_system(mesh, m, case.f, bc=case.bc, nm=nm, mu1=mu1, mu2=mu2)
            row.n_p = system.n_p
            row.nm = system.recon.nm
            row.lambda_m = system.recon.stats.lambda_m
            x = None
            for s in solvers:
                xs, rep = solve_system(system, s, hierarchy=hier, tol=tol, max_iters=max_iters)
                row.iterations[s] = rep.iterations if rep is not None else 0
                if rep is not None and not rep.converged:
                    row.error += f"{s} not converged; "
                if x is None:
                    x = xs
            row.l2_error, row.energy_error = measure_errors(case, system.recon,
                                                            system.coefficients(x))
            if conditions and system.n_p <= condition_limit:
                row.kappa_A = condition_number(system.A)
                row.kappa_AL = generalized_condition(system.A, system.AL)
        except (ReconstructionError, SolverError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("n=%d failed: %s", n, exc)
            row.error += str(exc)
        row.seconds = time.perf_counter() - t0
        rows.append(row)
    return ConvergenceTable(case.name, m, mu1, mu2, rows)


# -- discrete Miranda-Talenti check --------------------------------------------

def dmt_ratios(mesh, m: int, trials: int = 50, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Normalized dMT ratios for random broken polynomials.

    ``(sum ||D^2 v||^2 - sum ||Lap v||^2)_+`` divided by
    ``sum_{interior} h^-3 ||[v]||^2 + sum_{all} h^-1 ||[dv/dn]||^2`` for
    ``trials`` functions with unit-normal coefficients in the orthonormal
    bases.  Functions with vanishing jump terms are skipped.
    """
    basis = orthonormalize(mesh, m)
    forms = DGForms(mesh, basis)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        c = rng.standard_normal((mesh.num_elements, basis.size))
        t = forms.norm_terms(c, hessian=True)
        den = t["jump0_interior"] + t["jump1"]
        if den <= 1e-14 * max(t["hess"], 1.0):
            continue
        out.append(max(t["hess"] - t["lap"], 0.0) / den)
    return np.array(out)


def run_dmt_check(mesh, m: int, trials: int = 50, seed: int = DEFAULT_SEED) -> float:
    """Largest normalized dMT ratio over ``trials`` random broken polynomials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    r = dmt_ratios(mesh, m, trials, seed)
    return float(r.max()) if r.size else math.nan


# -- Lambda_m study -----------------------------------------------------------

def run_lambda_study(mesh, m: int, nm_values) -> list[dict]:
    """``Lambda_m`` and the largest patch depth for each ``N_m`` (no retries).

    Rows whose patches are not unisolvent carry ``nan``.
    """
    basis = orthonormalize(mesh, m)
    rows = []
    for nm in nm_values:
        nm = int(nm)
        row = {"nm": nm, "lambda_m": math.nan, "max_depth": -1, "error": ""}
        try:
            patches = build_all_patches(mesh, nm)
            row["max_depth"] = max(p.depth for p in patches)
            global_recon_operator(mesh, patches, basis)
            row["lambda_m"] = lambda_constants(basis, patches).lambda_m
        except (ReconstructionError, RuntimeError) as exc:
            row["error"] = str(exc)
        rows.append(row)
    return rows


def nm_sweep(dim: int, m: int, lo: float = 1.2, hi: float = 2.5) -> list[int]:
    """Integer ``N_m`` values covering ``[lo, hi] * dim P_m``."""
    k = dim_poly(dim, m)
    return list(range(math.ceil(lo * k), math.floor(hi * k) + 1))


# -- manifests ----------------------------------------------------------------

def run_manifest(config: dict, seconds: float, extra: dict | None = None) -> dict:
    out = {
        "config": config,
        "seed": config.get("seed", DEFAULT_SEED),
        "versions": {"biharm": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "wall_seconds": seconds,
    }
    if extra:
        out.update(extra)
    return out


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o)}")
