"""Quadrature on simplices and element-orthonormal polynomial bases.

Each element carries scaled monomials ``((x - x_K) / h_K) ** alpha`` in
graded-lex order, orthonormalized in ``L2(K)``.  Derivatives are exact
polynomial derivatives of the monomials, chained with ``h_K ** -|beta|``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial

import numpy as np
from scipy.special import roots_jacobi

MAX_QUAD_DEGREE = 30


class DegenerateElementError(np.linalg.LinAlgError):
    pass


def dim_poly(dim: int, m: int) -> int:
    """Dimension of the space of polynomials of total degree <= m in ``dim`` variables."""
    return comb(m + dim, dim)


@lru_cache(maxsize=None)
def exponents(dim: int, m: int) -> np.ndarray:
    """Multi-indices of total degree <= m, graded then reverse-lexicographic."""
    out = []
    for k in range(m + 1):
        for alpha in itertools.product(range(k, -1, -1), repeat=dim):
            if sum(alpha) == k:
                out.append(alpha)
    arr = np.array(out, dtype=np.int64)
    arr.flags.writeable = False
    return arr


# -- quadrature ---------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference simplex; weights sum to ``1 / dim!``."""
    dim: int
    degree: int
    points: np.ndarray        # reference coordinates, (nq, dim)
    weights: np.ndarray

    @property
    def barycentric(self) -> np.ndarray:
        return np.column_stack([1.0 - self.points.sum(axis=1), self.points])

    def map_to(self, simplices: np.ndarray):
        """Map to physical simplices (n, dim+1, D); returns points (n, nq, D), weights (n, nq)."""
        origin = simplices[:, :1, :]
        edges = simplices[:, 1:, :] - origin
        pts = origin + np.einsum("qk,nkd->nqd", self.points, edges)
        gram = np.einsum("nkd,nld->nkl", edges, edges)
        jac = np.sqrt(np.abs(np.linalg.det(gram))) if self.dim else np.ones(len(simplices))
        return pts, jac[:, None] * self.weights[None, :]


def _gauss_jacobi01(n: int, a: float):
    """Gauss-Jacobi nodes/weights on [0,1] for the weight (1-u)^a."""
    t, w = roots_jacobi(n, a, 0.0)
    return (1.0 + t) / 2.0, w / 2.0 ** (a + 1)


@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, degree: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi product rule exact for polynomials of ``degree``.

    Works for ``dim`` in 1..3 (1 covers the faces of triangles).  All weights
    are positive and all points are interior.
    """
    if dim not in (0, 1, 2, 3):
        raise ValueError(f"unsupported simplex dimension {dim}")
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise ValueError(f"quadrature degree must be in [0, {MAX_QUAD_DEGREE}], got {degree}")
    if dim == 0:
        return QuadratureRule(0, degree, np.zeros((1, 0)), np.ones(1))
    n = max(1, (degree + 2) // 2)
    # direction i carries the weight (1 - u_i)^(dim - 1 - i) from the collapse
    rules = [_gauss_jacobi01(n, float(dim - 1 - i)) for i in range(dim)]
    u = np.array(list(itertools.product(*[r[0] for r in rules])))
    w = np.prod(np.array(list(itertools.product(*[r[1] for r in rules]))), axis=1)
    pts = np.empty_like(u)
    scale = np.ones(len(u))
    for i in range(dim):
        pts[:, i] = scale * u[:, i]
        scale = scale * (1.0 - u[:, i])
    pts.flags.writeable = False
    w.flags.writeable = False
    return QuadratureRule(dim, degree, pts, w)


# -- monomials ----------------------------------------------------------------

def _falling(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product over coordinates of a!/(a-b)!, zero where a < b."""
    out = np.ones(a.shape[0])
    for i in range(a.shape[1]):
        for j in range(a.shape[0]):
            if a[j, i] < b[i]:
                out[j] = 0.0
            else:
                out[j] *= factorial(a[j, i]) / factorial(a[j, i] - b[i])
    return out


def monomial_derivative(xi: np.ndarray, m: int, beta) -> np.ndarray:
    """d^beta/dxi^beta of all scaled monomials of degree <= m at points ``xi`` (..., dim)."""
    dim = xi.shape[-1]
    alphas = exponents(dim, m)
    beta = np.asarray(beta, dtype=np.int64)
    coef = _falling(alphas, beta)
    powers = np.ones(xi.shape[:-1] + (dim, m + 1))
    for k in range(1, m + 1):
        powers[..., k] = powers[..., k - 1] * xi
    out = np.zeros(xi.shape[:-1] + (len(alphas),))
    for j, alpha in enumerate(alphas):
        if coef[j] == 0.0:
            continue
        val = coef[j]
        for i in range(dim):
            val = val * powers[..., i, alpha[i] - beta[i]]
        out[..., j] = val
    return out


def _unit(dim, *axes):
    b = [0] * dim
    for a in axes:
        b[a] += 1
    return tuple(b)


# -- element bases ------------------------------------------------------------

@dataclass(frozen=True)
class LocalBasis:
    """Orthonormal basis of P_m on one element.

    ``coef[:, i]`` holds the scaled-monomial coefficients of the i-th
    orthonormal function.
    """
    element: int
    degree: int
    center: np.ndarray
    scale: float
    coef: np.ndarray

    @property
    def size(self) -> int:
        return self.coef.shape[0]

    def evaluate(self, points, beta=None) -> np.ndarray:
        """Values (or the ``beta`` partial derivative) of all basis functions, (npts, l)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        dim = pts.shape[1]
        beta = (0,) * dim if beta is None else tuple(beta)
        if sum(beta) > 3 or min(beta) < 0:
            raise ValueError("derivative order must be between 0 and 3")
        xi = (pts - self.center) / self.scale
        mono = monomial_derivative(xi, self.degree, beta)
        return (mono @ self.coef) * self.scale ** (-sum(beta))


class BrokenBasis:
    """Orthonormal bases on all elements of a mesh (vectorized over elements)."""

    def __init__(self, mesh, m: int, centers, scales, coefs):
        self.mesh = mesh
        self.degree = m
        self.dim = mesh.dim
        self.centers = centers
        self.scales = scales
        self.coefs = coefs

    @property
    def size(self) -> int:
        return self.coefs.shape[1]

    def local(self, k: int) -> LocalBasis:
        return LocalBasis(int(k), self.degree, self.centers[k], float(self.scales[k]),
                          self.coefs[k])

    def derivative(self, elems, points, beta) -> np.ndarray:
        """Derivative ``beta`` of every basis function of ``elems[i]`` at ``points[i]``.

        ``points`` is (n, q, dim) and the result (n, q, l).
        """
        elems = np.asarray(elems)
        xi = (points - self.centers[elems][:, None, :]) / self.scales[elems][:, None, None]
        mono = monomial_derivative(xi, self.degree, beta)
        fac = self.scales[elems] ** (-float(sum(beta)))
        return (mono @ self.coefs[elems]) * fac[:, None, None]

    def values(self, elems, points):
        return self.derivative(elems, points, (0,) * self.dim)

    def gradient(self, elems, points):
        """(n, q, l, dim)."""
        return np.stack([self.derivative(elems, points, _unit(self.dim, a))
                         for a in range(self.dim)], axis=-1)

    def hessian(self, elems, points):
        """(n, q, l, dim, dim)."""
        d = self.dim
        n, q = points.shape[:2]
        out = np.empty((n, q, self.size, d, d))
        for a in range(d):
            for b in range(a, d):
                v = self.derivative(elems, points, _unit(d, a, b))
                out[..., a, b] = v
                out[..., b, a] = v
        return out

    def laplacian(self, elems, points):
        return sum(self.derivative(elems, points, _unit(self.dim, a, a))
                   for a in range(self.dim))

    def grad_laplacian(self, elems, points):
        """Gradient of the Laplacian, (n, q, l, dim)."""
        d = self.dim
        return np.stack([sum(self.derivative(elems, points, _unit(d, a, a, b))
                             for a in range(d)) for b in range(d)], axis=-1)

    def eval_coefficients(self, coeffs, elems, points, kind="value"):
        """Evaluate broken functions with coefficients ``coeffs`` (ne, l) (or (ne*l,))."""
        c = np.asarray(coeffs).reshape(-1, self.size)[elems]
        if kind == "value":
            return np.einsum("nqi,ni->nq", self.values(elems, points), c)
        if kind == "laplacian":
            return np.einsum("nqi,ni->nq", self.laplacian(elems, points), c)
        if kind == "gradient":
            return np.einsum("nqid,ni->nqd", self.gradient(elems, points), c)
        if kind == "hessian":
            return np.einsum("nqide,ni->nqde", self.hessian(elems, points), c)
        raise ValueError(kind)

    def project(self, func, degree=None) -> np.ndarray:
        """L2(K) projection coefficients (ne, l) of ``func(points) -> values``."""
        mesh = self.mesh
        rule = simplex_quadrature(self.dim, degree or 2 * self.degree + 4)
        pts, w = rule.map_to(mesh.element_points)
        elems = np.arange(mesh.num_elements)
        vals = self.values(elems, pts)
        return np.einsum("nqi,nq->ni", vals, w * func(pts))


def orthonormalize(mesh, m: int, rule: QuadratureRule | None = None) -> BrokenBasis:
    """Element-orthonormal bases of P_m for every element of ``mesh``.

    Gram-Schmidt in graded-lex order, carried out as a Cholesky factorization of
    the scaled-monomial Gram matrix and repeated once for accuracy.

    Raises
    ------
    DegenerateElementError
        If the Gram matrix of some element is numerically singular.
    """
    if rule is None:
        rule = simplex_quadrature(mesh.dim, 2 * m)
    if rule.degree < 2 * m:
        raise ValueError("quadrature must be exact to degree 2m")
    d = mesh.dim
    l = dim_poly(d, m)
    centers = mesh.barycenters
    scales = mesh.element_diameters
    pts, w = rule.map_to(mesh.element_points)
    xi = (pts - centers[:, None, :]) / scales[:, None, None]
    mono = monomial_derivative(xi, m, (0,) * d)            # (ne, q, l)
    coefs = np.broadcast_to(np.eye(l), (mesh.num_elements, l, l)).copy()
    for _ in range(2):
        vals = mono @ coefs
        gram = np.transpose(vals * w[:, :, None], (0, 2, 1)) @ vals
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise DegenerateElementError("singular Gram matrix on some element") from exc
        diag = np.abs(np.diagonal(chol, axis1=1, axis2=2))
        ref = np.sqrt(mesh.volumes)[:, None]
        if np.any(diag < 1e-12 * ref):
            bad = int(np.argmin((diag / ref).min(axis=1)))
            raise DegenerateElementError(f"singular Gram matrix on element {bad}")
        inv_t = np.linalg.inv(np.transpose(chol, (0, 2, 1)))
        coefs = coefs @ inv_t
    return BrokenBasis(mesh, m, centers, scales, coefs)
