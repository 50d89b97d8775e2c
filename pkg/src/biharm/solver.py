"""Conjugate gradients, W-cycle multigrid for the low-order matrix and spectral tools.

Two multigrid variants approximate ``A_L^{-1}``:

* variant I builds coarse matrices by smoothed prolongation,
  ``A_{j-1} = (S_j P_j)^T A_j (S_j P_j)`` with the polynomial smoother
  ``S_j = I - 2.9 A_j / lam_j + 2.15 (A_j / lam_j)^2``;
* variant II rediscretizes the normal-gradient-jump form on every level and
  uses plain prolongation and its transpose.

Both use one forward Gauss-Seidel sweep before and one backward sweep after
the coarse correction, so the cycle is a symmetric operator.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

SMOOTHER_COEFFS = (2.9, 2.15)
DENSE_EIG_LIMIT = 3000


class SolverError(RuntimeError):
    pass


@dataclass
class SolveReport:
    iterations: int
    residuals: list = field(repr=False)
    converged: bool
    wall_time: float
    relative_residual: float


# -- Krylov -------------------------------------------------------------------

def pcg(A, b, precond=None, *, tol: float = 1e-9, max_iters: int = 3000, x0=None):
    """Preconditioned conjugate gradients.

    Stops when ``||r_k|| <= tol * ||b||`` or after ``max_iters`` iterations.
    ``precond`` is a callable ``r -> z`` (or ``None`` for plain CG).

    Returns
    -------
    x : ndarray
    report : SolveReport
    """
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x if x0 is not None else b.copy()
    bnorm = float(np.linalg.norm(b))
    hist = [float(np.linalg.norm(r))]
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, hist, True, time.perf_counter() - t0, 0.0)
    target = tol * bnorm
    if hist[0] <= target:
        return x, SolveReport(0, hist, True, time.perf_counter() - t0, hist[0] / bnorm)
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    converged = False
    while it < max_iters:
        ap = A @ p
        pap = float(p @ ap)
        if pap <= 0.0:
            log.warning("CG breakdown: p^T A p = %g at iteration %d", pap, it)
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        rn = float(np.linalg.norm(r))
        hist.append(rn)
        if rn <= target:
            converged = True
            break
        z = r if precond is None else precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(it, hist, converged, time.perf_counter() - t0, hist[-1] / bnorm)


def cg(A, b, **kw):
    return pcg(A, b, None, **kw)


# -- spectral estimates -------------------------------------------------------

def estimate_lambda(A, *, safety: float = 1.1, rtol: float = 1e-3, max_iters: int = 1000,
                    seed: int = 0) -> float:
    """Upper bound for the spectral radius by power iteration.

    Iterates until the Rayleigh quotient changes by less than ``rtol``
    (relative) and returns it times ``safety``.
    """
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iters):
        w = A @ v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if est > 0.0 and abs(new - est) <= rtol * abs(new):
            est = new
            break
        est = new
    return safety * est


def _as_operator(A):
    return A if isinstance(A, spla.LinearOperator) else spla.aslinearoperator(A)


def extreme_eigenvalues(A, B=None, *, tol: float = 1e-8) -> tuple[float, float]:
    """Smallest and largest eigenvalues of the SPD matrix ``A`` (or of the pencil ``(A, B)``).

    Uses implicitly restarted Lanczos (ARPACK): plain for the largest,
    shift-invert about zero for the smallest, and the ``B`` inner product for
    the generalized problem.  Falls back to a dense solve when Lanczos fails
    and the size is at most ``DENSE_EIG_LIMIT``.
    """
    n = A.shape[0]
    if n <= 2:
        return _dense_extremes(A, B)
    # fixed start vector so that repeated runs give identical digits
    v0 = np.random.default_rng(0).standard_normal(n)
    try:
        if B is None:
            lmax = spla.eigsh(A, k=1, which="LA", tol=tol, v0=v0, return_eigenvectors=False)[0]
            lmin = spla.eigsh(sp.csc_matrix(A), k=1, sigma=0.0, which="LM", tol=tol, v0=v0,
                              return_eigenvectors=False)[0]
        else:
            blu = spla.splu(sp.csc_matrix(B))
            binv = spla.LinearOperator((n, n), matvec=blu.solve, dtype=float)
            lmax = spla.eigsh(A, k=1, M=B, Minv=binv, which="LA", tol=tol, v0=v0,
                              return_eigenvectors=False)[0]
            lmin = spla.eigsh(sp.csc_matrix(A), k=1, M=sp.csc_matrix(B), sigma=0.0, which="LM",
                              tol=tol, v0=v0, return_eigenvectors=False)[0]
        return float(lmin), float(lmax)
    except (spla.ArpackNoConvergence, RuntimeError) as exc:
        if n > DENSE_EIG_LIMIT:
            raise SolverError(f"Lanczos failed for n={n}: {exc}") from exc
        log.info("Lanczos failed (%s); dense fallback", exc)
        return _dense_extremes(A, B)


def _dense_extremes(A, B=None):
    a = A.toarray() if sp.issparse(A) else np.asarray(A)
    b = None if B is None else (B.toarray() if sp.issparse(B) else np.asarray(B))
    try:
        ev = sla.eigh(a, b, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"dense eigensolve failed: {exc}") from exc
    return float(ev[0]), float(ev[-1])


def condition_number(A) -> float:
    lmin, lmax = extreme_eigenvalues(A)
    if lmin <= 0.0:
        raise SolverError(f"matrix is not positive definite (lambda_min={lmin:g})")
    return lmax / lmin


def generalized_condition(A, B) -> float:
    """``kappa(B^{-1} A)`` for SPD ``A`` and ``B``."""
    lmin, lmax = extreme_eigenvalues(A, B)
    if lmin <= 0.0:
        raise SolverError(f"pencil is not positive definite (lambda_min={lmin:g})")
    return lmax / lmin


# -- smoothing ----------------------------------------------------------------

class GaussSeidel:
    """Forward and backward Gauss-Seidel sweeps in natural node order."""

    def __init__(self, A):
        A = sp.csr_matrix(A)
        self.A = A
        self.lower = sp.tril(A, format="csr")
        self.upper = sp.triu(A, format="csr")

    def forward(self, x, b):
        return x + spla.spsolve_triangular(self.lower, b - self.A @ x, lower=True)

    def backward(self, x, b):
        return x + spla.spsolve_triangular(self.upper, b - self.A @ x, lower=False)


def smoother_polynomial(t):
    """``g(t) = 1 - 2.9 t + 2.15 t^2``."""
    a, b = SMOOTHER_COEFFS
    return 1.0 - a * t + b * t * t


def smoothed_energy_factor(t):
    """``f(t) = g(t)^2 t``, the factor bounding the coarse spectral radius."""
    return smoother_polynomial(t) ** 2 * t


def apply_smoother(A, lam: float, x):
    """``S x`` with ``S = g(A / lam)`` (never formed explicitly)."""
    a, b = SMOOTHER_COEFFS
    ax = A @ x
    return x - (a / lam) * ax + (b / lam ** 2) * (A @ ax)


def smoothed_prolongation(A, lam: float, P) -> sp.csr_matrix:
    """Sparse ``S P`` for the polynomial smoother of ``A``."""
    a, b = SMOOTHER_COEFFS
    P = sp.csr_matrix(P)
    AP = sp.csr_matrix(A) @ P
    return (P - (a / lam) * AP + (b / lam ** 2) * (sp.csr_matrix(A) @ AP)).tocsr()


# -- multigrid ----------------------------------------------------------------

@dataclass
class MGLevel:
    A: sp.csr_matrix
    gs: GaussSeidel | None = None
    lam: float | None = None                # variant I only
    prolong: sp.csr_matrix | None = None   # to this level from the one below


class MGHierarchy:
    """Levels ``0`` (coarsest) to ``J-1`` (finest) of a W-cycle multigrid.

    Use :func:`build_mg_variant1` or :func:`build_mg_variant2` to construct.
    """

    def __init__(self, variant: str, levels: list[MGLevel]):
        self.variant = variant
        self.levels = levels
        self._coarse = spla.splu(sp.csc_matrix(levels[0].A))

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def lambdas(self) -> list:
        return [lv.lam for lv in self.levels]

    def cycle(self, b, x=None, level: int | None = None) -> np.ndarray:
        """One W-cycle on ``level`` (default finest) for ``A_level x = b``."""
        j = self.num_levels - 1 if level is None else level
        b = np.asarray(b, dtype=float)
        x = np.zeros_like(b) if x is None else np.array(x, dtype=float)
        return self._cycle(j, x, b)

    def _cycle(self, j, x, b):
        if j == 0:
            return self._coarse.solve(b)
        lv = self.levels[j]
        x = lv.gs.forward(x, b)
        r = b - lv.A @ x
        P = lv.prolong
        y = P.T @ r
        z = self._cycle(j - 1, np.zeros_like(y), y)
        z = self._cycle(j - 1, z, y)
        x = x + P @ z
        return lv.gs.backward(x, b)

    def preconditioner(self):
        """Callable ``r -> one W-cycle from zero``."""
        return lambda r: self.cycle(r)

    def as_operator(self) -> spla.LinearOperator:
        n = self.levels[-1].A.shape[0]
        return spla.LinearOperator((n, n), matvec=self.cycle, dtype=float)


def build_mg_variant1(A, prolongations, lam: float | None = None, *,
                      coarsening_factor: float | None = None, check_lambda: bool = True,
                      dim: int = 2) -> MGHierarchy:
    """Smoothed-prolongation hierarchy on the finest matrix ``A``.

    ``prolongations[j]`` maps interior nodal vectors of level ``j`` to level
    ``j + 1``.  The spectral bounds follow ``lam_{j-1} = c * lam_j`` with
    ``c = coarsening_factor``; by default ``c = 2^dim / 16``, the Euclidean
    counterpart of the L2 bound (``||P||^2`` is about ``2^dim`` for nodal
    prolongation on red-refined meshes).

    Raises
    ------
    SolverError
        If ``lam`` underestimates the spectral radius of ``A`` by more than 1%.
    """
    A = sp.csr_matrix(A)
    if lam is None:
        lam = estimate_lambda(A)
    if check_lambda and A.shape[0] > 1:
        v0 = np.random.default_rng(0).standard_normal(A.shape[0])
        rho = spla.eigsh(A, k=1, which="LA", tol=1e-6, v0=v0, return_eigenvectors=False)[0] \
            if A.shape[0] > 2 else np.linalg.eigvalsh(A.toarray())[-1]
        if lam < 0.99 * rho:
            raise SolverError(f"lambda={lam:g} is below the spectral radius {rho:g}")
    c = (2.0 ** dim) / 16.0 if coarsening_factor is None else coarsening_factor
    nlev = len(prolongations) + 1
    levels = [None] * nlev
    levels[-1] = MGLevel(A, lam=lam)
    for j in range(nlev - 1, 0, -1):
        lv = levels[j]
        sp_ = smoothed_prolongation(lv.A, lv.lam, prolongations[j - 1])
        lv.prolong = sp_
        lv.gs = GaussSeidel(lv.A)
        coarse = (sp_.T @ lv.A @ sp_).tocsr()
        coarse = ((coarse + coarse.T) * 0.5).tocsr()
        levels[j - 1] = MGLevel(coarse, lam=c * lv.lam)
    return MGHierarchy("I", levels)


def build_mg_variant2(matrices, prolongations) -> MGHierarchy:
    """Rediscretized hierarchy: ``matrices[j]`` is the low-order matrix on level ``j``."""
    nlev = len(matrices)
    if len(prolongations) != nlev - 1:
        raise ValueError("need one prolongation per level transition")
    levels = []
    for j, A in enumerate(matrices):
        A = sp.csr_matrix(A)
        lv = MGLevel(A)
        if j > 0:
            lv.gs = GaussSeidel(A)
            lv.prolong = sp.csr_matrix(prolongations[j - 1])
        levels.append(lv)
    return MGHierarchy("II", levels)


def build_mg(variant: str, hierarchy, assemble_al, **kw) -> MGHierarchy:
    """Multigrid for the low-order matrix on a :class:`~biharm.mesh.MeshHierarchy`.

    ``assemble_al(mesh)`` returns the interior low-order matrix of a mesh.
    """
    prolongs = [hierarchy.interior_prolongation(j) for j in range(hierarchy.num_levels - 1)]
    if variant in ("I", "1", "mg1"):
        return build_mg_variant1(assemble_al(hierarchy.finest), prolongs,
                                 dim=hierarchy.finest.dim, **kw)
    if variant in ("II", "2", "mg2"):
        return build_mg_variant2([assemble_al(m) for m in hierarchy.meshes], prolongs)
    raise ValueError(f"unknown multigrid variant {variant!r}")


def direct_preconditioner(A):
    """Exact ``A^{-1}`` by sparse LU, as a callable."""
    lu = spla.splu(sp.csc_matrix(A))
    return lu.solve
