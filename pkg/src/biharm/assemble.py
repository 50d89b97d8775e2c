"""Interior penalty forms, system matrices and load vectors.

Everything is first assembled in the broken space (element-orthonormal bases,
``ne * l`` unknowns) and then pulled back to nodal unknowns through the
reconstruction operator: ``A_m = R^T D R`` with ``R`` restricted to interior
nodes.  Because the bases are orthonormal the broken mass matrix is the
identity and ``M_m = R^T R``.

Jump and average follow the usual convention: on an interior face with
elements ``K+`` (smaller index) and ``K-`` the jump is ``v+ - v-`` and the
normal points out of ``K+``; on a boundary face both operators return the
single trace and the normal is the outward one.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse as sp

from .polyspace import BrokenBasis, simplex_quadrature
from .recon import ReconOperator, build_reconstruction

log = logging.getLogger(__name__)

NORM_KINDS = ("energy", "energy_tilde", "hessian")


PENALTY_SCALE = 2.5


def default_penalties(m: int) -> tuple[float, float]:
    """``(mu1, mu2) = (2.5 m^4, 2.5 m^2)``.

    Large enough for ``a_h`` to be coercive on the reconstructed space
    (checked for m <= 4 in 2D and m <= 3 in 3D), small enough to avoid the
    pre-asymptotic locking that heavier jump penalties cause on coarse meshes.
    """
    return PENALTY_SCALE * m ** 4, PENALTY_SCALE * m ** 2


@dataclass(frozen=True)
class BoundaryData:
    """Clamped boundary data ``u = g1`` and ``du/dn = g2`` on the boundary.

    ``g1(points)`` takes points (..., d); ``g2(points, normals)`` also receives
    the outward unit normals at those points.
    """
    g1: Callable[[np.ndarray], np.ndarray]
    g2: Callable[[np.ndarray, np.ndarray], np.ndarray]

    @classmethod
    def zero(cls) -> "BoundaryData":
        return cls(lambda x: np.zeros(x.shape[:-1]), lambda x, n: np.zeros(x.shape[:-1]))

    @classmethod
    def from_solution(cls, u, grad_u) -> "BoundaryData":
        """Data taken from an exact solution ``u`` and its gradient (..., d)."""
        return cls(u, lambda x, n: np.einsum("...d,...d->...", grad_u(x), n))


class _FaceSide:
    """Traces of all basis functions of one side of a batch of faces."""

    def __init__(self, basis: BrokenBasis, elems, pts, normals):
        self.elems = elems
        grad = basis.gradient(elems, pts)                   # (f, q, l, d)
        glap = basis.grad_laplacian(elems, pts)
        nrm = normals[:, None, None, :]
        self.value = basis.values(elems, pts)                # (f, q, l)
        self.dn = (grad * nrm).sum(-1)
        self.lap = basis.laplacian(elems, pts)
        self.dn_lap = (glap * nrm).sum(-1)


class DGForms:
    """Quadrature caches for the broken interior penalty forms on one mesh.

    Parameters
    ----------
    mesh : Mesh
    basis : BrokenBasis
    quad_degree : int, optional
        Exactness of volume and face rules, default ``2 m``.
    """

    def __init__(self, mesh, basis: BrokenBasis, quad_degree: int | None = None):
        self.mesh = mesh
        self.basis = basis
        m = basis.degree
        self.l = basis.size
        deg = max(quad_degree if quad_degree is not None else 2 * m, 1)
        self.quad_degree = deg
        d = mesh.dim
        ne = mesh.num_elements
        self.elements = np.arange(ne)

        vrule = simplex_quadrature(d, deg)
        vpts, self.vol_weights = vrule.map_to(mesh.element_points)
        self.vol_points = vpts
        self.vol_lap = basis.laplacian(self.elements, vpts)           # (ne, q, l)
        self._vol_hess = None

        frule = simplex_quadrature(d - 1, deg)
        fpts, fw = frule.map_to(mesh.vertices[mesh.face_vertices])
        fel = mesh.face_elements
        normals = mesh.face_normals
        hf = mesh.face_diameters
        inner = fel[:, 1] >= 0
        self.interior_faces = np.flatnonzero(inner)
        self.boundary_faces = np.flatnonzero(~inner)
        fi, fb = self.interior_faces, self.boundary_faces
        self.face_points = fpts
        self.face_weights = fw
        self.face_h = hf
        self.plus = _FaceSide(basis, fel[fi, 0], fpts[fi], normals[fi])
        self.minus = _FaceSide(basis, fel[fi, 1], fpts[fi], normals[fi])
        self.bnd = _FaceSide(basis, fel[fb, 0], fpts[fb], normals[fb])
        self.bnd_normals = normals[fb]

    # -- matrices -------------------------------------------------------------

    @property
    def vol_hess(self) -> np.ndarray:
        if self._vol_hess is None:
            self._vol_hess = self.basis.hessian(self.elements, self.vol_points)
        return self._vol_hess

    def broken_matrix(self, mu1: float, mu2: float) -> sp.csr_array:
        """Matrix of ``a_h`` on the broken space, (ne*l, ne*l)."""
        l = self.l
        ne = self.mesh.num_elements
        lap = self.vol_lap * np.sqrt(self.vol_weights)[:, :, None]
        vol = np.transpose(lap, (0, 2, 1)) @ lap                        # (ne, l, l)
        rows, cols, vals = [], [], []

        def add(ea, eb, blocks):
            ia = ea[:, None, None] * l + np.arange(l)[None, :, None]
            ib = eb[:, None, None] * l + np.arange(l)[None, None, :]
            rows.append(np.broadcast_to(ia, blocks.shape).ravel())
            cols.append(np.broadcast_to(ib, blocks.shape).ravel())
            vals.append(blocks.ravel())

        add(self.elements, self.elements, vol)

        fi, fb = self.interior_faces, self.boundary_faces
        hi = self.face_h[fi][:, None]
        wi = self.face_weights[fi]
        sides = ((self.plus, 1.0), (self.minus, -1.0))
        for sa, sga in sides:
            for sb, sgb in sides:
                blk = self._face_block(sa, sga, 0.5, sb, sgb, 0.5, wi, hi, mu1, mu2)
                add(sa.elems, sb.elems, blk)
        hb = self.face_h[fb][:, None]
        blk = self._face_block(self.bnd, 1.0, 1.0, self.bnd, 1.0, 1.0,
                               self.face_weights[fb], hb, mu1, mu2)
        add(self.bnd.elems, self.bnd.elems, blk)

        n = ne * l
        mat = sp.coo_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(n, n)).tocsr()
        return symmetrize(mat)

    def norm_matrix(self, which: str = "energy") -> sp.csr_array:
        """Broken Gram matrix of the squared energy norm ``which`` (see :meth:`energy_norm`)."""
        if which not in NORM_KINDS:
            raise ValueError(f"unknown norm {which!r}; expected one of {NORM_KINDS}")
        l = self.l
        ne = self.mesh.num_elements
        sw = np.sqrt(self.vol_weights)
        if which == "hessian":
            hs = self.vol_hess * sw[:, :, None, None, None]
            hs = np.transpose(hs, (0, 1, 3, 4, 2)).reshape(ne, -1, l)
        else:
            hs = self.vol_lap * sw[:, :, None]
        rows, cols, vals = [], [], []

        def add(ea, eb, blocks):
            ia = ea[:, None, None] * l + np.arange(l)[None, :, None]
            ib = eb[:, None, None] * l + np.arange(l)[None, None, :]
            rows.append(np.broadcast_to(ia, blocks.shape).ravel())
            cols.append(np.broadcast_to(ib, blocks.shape).ravel())
            vals.append(blocks.ravel())

        add(self.elements, self.elements, np.transpose(hs, (0, 2, 1)) @ hs)
        tilde = which == "energy_tilde"
        fi, fb = self.interior_faces, self.boundary_faces
        groups = (((self.plus, 1.0, 0.5), (self.minus, -1.0, 0.5)), fi), \
                 (((self.bnd, 1.0, 1.0),), fb)
        for sides, faces in groups:
            w = self.face_weights[faces]
            h = self.face_h[faces][:, None]
            for a, sa, wa in sides:
                for b, sb, wb in sides:
                    blk = _pair(sa * a.value, sb * b.value, w / h ** 3)
                    blk += _pair(sa * a.dn, sb * b.dn, w / h)
                    if tilde:
                        blk += _pair(wa * a.lap, wb * b.lap, w * h)
                        blk += _pair(wa * a.dn_lap, wb * b.dn_lap, w * h ** 3)
                    add(a.elems, b.elems, blk)
        n = ne * l
        mat = sp.coo_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(n, n)).tocsr()
        return symmetrize(mat)

    @staticmethod
    def _face_block(a, sa, wa, b, sb, wb, w, h, mu1, mu2):
        """Face integrals for test side ``a`` (rows) and trial side ``b`` (cols).

        ``s`` is the sign of the side in the jump and ``w`` its average weight.
        """
        jv_a, jn_a = sa * a.value, sa * a.dn
        jv_b, jn_b = sb * b.value, sb * b.dn
        al_a, an_a = wa * a.lap, wa * a.dn_lap
        al_b, an_b = wb * b.lap, wb * b.dn_lap

        blk = _pair(jv_a, an_b, w) + _pair(an_a, jv_b, w)
        blk -= _pair(al_a, jn_b, w) + _pair(jn_a, al_b, w)
        blk += _pair(jv_a, jv_b, mu1 * w / h ** 3) + _pair(jn_a, jn_b, mu2 * w / h)
        return blk

    # -- evaluation of discrete functions -------------------------------------

    def _traces(self, coeffs):
        c = np.asarray(coeffs, dtype=float).reshape(-1, self.l)

        def ev(side, attr):
            return np.einsum("fql,fl->fq", getattr(side, attr), c[side.elems])

        return c, ev

    def norm_terms(self, coeffs, *, hessian: bool = False,
                   bc: BoundaryData | None = None) -> dict:
        """Squared pieces of the energy norms for broken coefficients (ne, l).

        Keys: ``lap`` (sum of ||Lap v||^2), ``hess`` (sum of ||D^2 v||^2, only
        with ``hessian=True``), ``jump0`` / ``jump0_interior`` (h^-3 ||[v]||^2
        over all / interior faces), ``jump1`` (h^-1 ||[dv/dn]||^2),
        ``avg_lap`` (h ||{Lap v}||^2) and ``avg_dnlap`` (h^3 ||{d Lap v/dn}||^2).

        With ``bc`` the boundary jumps are taken against the data,
        ``v - g1`` and ``dv/dn - g2``.
        """
        c, ev = self._traces(coeffs)
        vw = self.vol_weights
        lapv = np.einsum("nql,nl->nq", self.vol_lap, c)
        out = {"lap": float((vw * lapv ** 2).sum())}
        if hessian:
            hv = np.einsum("nqlab,nl->nqab", self.vol_hess, c)
            out["hess"] = float((vw[:, :, None, None] * hv ** 2).sum())

        fi, fb = self.interior_faces, self.boundary_faces
        hi, hb = self.face_h[fi][:, None], self.face_h[fb][:, None]
        wi, wb = self.face_weights[fi], self.face_weights[fb]
        p, q, b = self.plus, self.minus, self.bnd
        j0i = ev(p, "value") - ev(q, "value")
        j1i = ev(p, "dn") - ev(q, "dn")
        ali = 0.5 * (ev(p, "lap") + ev(q, "lap"))
        ani = 0.5 * (ev(p, "dn_lap") + ev(q, "dn_lap"))
        j0b, j1b = ev(b, "value"), ev(b, "dn")
        if bc is not None:
            pts = self.face_points[fb]
            nrm = np.broadcast_to(self.bnd_normals[:, None, :], pts.shape)
            j0b = j0b - bc.g1(pts)
            j1b = j1b - bc.g2(pts, nrm)
        alb, anb = ev(b, "lap"), ev(b, "dn_lap")

        out["jump0_interior"] = float((wi * j0i ** 2 / hi ** 3).sum())
        out["jump0"] = out["jump0_interior"] + float((wb * j0b ** 2 / hb ** 3).sum())
        out["jump1"] = float((wi * j1i ** 2 / hi).sum() + (wb * j1b ** 2 / hb).sum())
        out["avg_lap"] = float((wi * hi * ali ** 2).sum() + (wb * hb * alb ** 2).sum())
        out["avg_dnlap"] = float((wi * hi ** 3 * ani ** 2).sum() + (wb * hb ** 3 * anb ** 2).sum())
        return out

    def energy_norm(self, coeffs, which: str = "energy") -> float:
        """Energy norm of a broken function.

        ``which`` is ``"energy"`` (Laplacian volume part plus jumps),
        ``"energy_tilde"`` (adds the scaled averages) or ``"hessian"`` (full
        Hessian in place of the Laplacian).
        """
        t = self.norm_terms(coeffs, hessian=which == "hessian")
        jumps = t["jump0"] + t["jump1"]
        if which == "energy":
            val = t["lap"] + jumps
        elif which == "energy_tilde":
            val = t["lap"] + jumps + t["avg_lap"] + t["avg_dnlap"]
        elif which == "hessian":
            val = t["hess"] + jumps
        else:
            raise ValueError(f"unknown norm {which!r}; expected one of {NORM_KINDS}")
        return float(np.sqrt(val))

    def boundary_functional(self, bc: BoundaryData, mu1: float, mu2: float) -> np.ndarray:
        """Broken vector of the boundary-data terms.

        ``sum_b int g1 dLap v/dn - g2 Lap v + mu1 h^-3 g1 v + mu2 h^-1 g2 dv/dn``.
        """
        fb = self.boundary_faces
        pts = self.face_points[fb]
        nrm = np.broadcast_to(self.bnd_normals[:, None, :], pts.shape)
        g1 = np.asarray(bc.g1(pts), dtype=float)
        g2 = np.asarray(bc.g2(pts, nrm), dtype=float)
        w = self.face_weights[fb]
        h = self.face_h[fb][:, None]
        b = self.bnd
        dens = (np.einsum("fq,fql->fql", w * g1, b.dn_lap)
                - np.einsum("fq,fql->fql", w * g2, b.lap)
                + np.einsum("fq,fql->fql", mu1 * w * g1 / h ** 3, b.value)
                + np.einsum("fq,fql->fql", mu2 * w * g2 / h, b.dn))
        out = np.zeros((self.mesh.num_elements, self.l))
        np.add.at(out, b.elems, dens.sum(axis=1))
        return out.ravel()


def _pair(x, y, weight):
    """Batched ``sum_q weight x_i y_j`` for traces (f, q, l)."""
    return np.transpose(x * weight[:, :, None], (0, 2, 1)) @ y


def symmetrize(mat):
    return ((mat + mat.T) * 0.5).tocsr()


# -- nodal assembly -----------------------------------------------------------

def assemble_Am(recon: ReconOperator, forms: DGForms, mu1: float, mu2: float) -> sp.csr_array:
    """Interior penalty stiffness matrix on interior nodal unknowns, (n_p, n_p)."""
    r = recon.interior
    return symmetrize(r.T @ (forms.broken_matrix(mu1, mu2) @ r))


def assemble_mass(recon: ReconOperator) -> sp.csr_array:
    """``M_m = R^T R`` (the broken mass matrix is the identity)."""
    r = recon.interior
    return symmetrize(r.T @ r)


def assemble_AL(mesh, *, scale: float = 1.0, interior_only: bool = True) -> sp.csr_array:
    """Normal-gradient-jump form ``sum_e h_e^-1 int_e [dv/dn][dw/dn]`` on continuous linears.

    All faces contribute; on boundary faces the jump is the single trace.
    ``scale`` multiplies the whole matrix.
    """
    d = mesh.dim
    fel = mesh.face_elements
    nrm = mesh.face_normals
    coef = scale * mesh.face_measures / mesh.face_diameters
    grads = mesh.barycentric_gradients                      # (ne, d+1, d)
    rows, cols = [], []
    nf = mesh.num_faces
    # per face, the jump of the normal derivative is a linear combination of
    # the nodal values of K+ (plus sign) and K- (minus sign)
    gp = np.einsum("fkd,fd->fk", grads[fel[:, 0]], nrm)
    inner = fel[:, 1] >= 0
    gm = np.zeros_like(gp)
    gm[inner] = -np.einsum("fkd,fd->fk", grads[fel[inner, 1]], nrm[inner])
    idx = np.concatenate([mesh.elements[fel[:, 0]],
                          np.where(inner[:, None], mesh.elements[np.maximum(fel[:, 1], 0)], 0)],
                         axis=1)                             # (nf, 2d+2)
    g = np.concatenate([gp, gm], axis=1)
    blk = coef[:, None, None] * g[:, :, None] * g[:, None, :]
    k = 2 * (d + 1)
    rows = np.broadcast_to(idx[:, :, None], (nf, k, k)).ravel()
    cols = np.broadcast_to(idx[:, None, :], (nf, k, k)).ravel()
    nv = mesh.num_vertices
    full = sp.coo_array((blk.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    full = symmetrize(full)
    if not interior_only:
        return full
    ii = mesh.interior_nodes
    return full[ii][:, ii].tocsr()


def assemble_rhs(recon: ReconOperator, f, quad_degree: int | None = None) -> np.ndarray:
    """Load vector ``(f, phi_nu)`` for every interior node."""
    coeffs = recon.basis.project(f, quad_degree or 2 * recon.degree + 6)
    return recon.interior.T @ coeffs.ravel()


def assemble_rhs_inhomogeneous(recon: ReconOperator, forms: DGForms, f, bc: BoundaryData,
                               mu1: float, mu2: float, broken=None,
                               quad_degree: int | None = None):
    """Load vector for nonzero clamped data.

    Returns ``(b, offset)`` where ``offset`` are the broken coefficients of the
    reconstructed boundary interpolant ``w1 = R g1_I``; the discrete solution
    is ``w_h + w1``.
    """
    mesh = recon.mesh
    g1_nodes = np.asarray(bc.g1(mesh.vertices[mesh.boundary_nodes]), dtype=float)
    offset = recon.boundary @ g1_nodes
    if broken is None:
        broken = forms.broken_matrix(mu1, mu2)
    coeffs = recon.basis.project(f, quad_degree or 2 * recon.degree + 6).ravel()
    rhs = coeffs - broken @ offset + forms.boundary_functional(bc, mu1, mu2)
    return recon.interior.T @ rhs, offset


# -- whole system -------------------------------------------------------------

@dataclass
class DGSystem:
    """Assembled interior penalty system on interior nodal unknowns."""
    mesh: object
    recon: ReconOperator
    forms: DGForms
    m: int
    mu1: float
    mu2: float
    A: sp.csr_array
    M: sp.csr_array
    AL: sp.csr_array
    b: np.ndarray
    offset: np.ndarray = field(default=None, repr=False)

    @property
    def n_p(self) -> int:
        return self.A.shape[0]

    def coefficients(self, u) -> np.ndarray:
        """Broken coefficients (ne, l) of the discrete function for nodal unknowns ``u``."""
        c = self.recon.interior @ np.asarray(u, dtype=float)
        if self.offset is not None:
            c = c + self.offset
        return c.reshape(-1, self.recon.basis.size)

    def energy_norm(self, u, which: str = "energy") -> float:
        return self.forms.energy_norm(self.coefficients(u), which)

    def export(self, directory) -> list[str]:
        """Write A_m, M_m, A_L and b in Matrix Market format with 17 significant digits."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for name, mat in (("A_m", self.A), ("M_m", self.M), ("A_L", self.AL)):
            path = os.path.join(directory, f"{name}.mtx")
            scipy.io.mmwrite(path, sp.coo_matrix(mat), precision=17, symmetry="general")
            paths.append(path)
        path = os.path.join(directory, "b.mtx")
        scipy.io.mmwrite(path, np.asarray(self.b, dtype=float)[:, None], precision=17)
        paths.append(path)
        return paths


def assemble_system(mesh, m: int, f, *, bc: BoundaryData | None = None, nm: int | None = None,
                    mu1: float | None = None, mu2: float | None = None,
                    recon: ReconOperator | None = None) -> DGSystem:
    """Build reconstruction, forms, A_m, M_m, A_L and the load vector.

    ``bc=None`` means homogeneous clamped conditions.
    """
    d1, d2 = default_penalties(m)
    mu1 = d1 if mu1 is None else float(mu1)
    mu2 = d2 if mu2 is None else float(mu2)
    if recon is None:
        recon = build_reconstruction(mesh, m, nm)
    forms = DGForms(mesh, recon.basis)
    broken = forms.broken_matrix(mu1, mu2)
    r = recon.interior
    A = symmetrize(r.T @ (broken @ r))
    M = assemble_mass(recon)
    AL = assemble_AL(mesh)
    offset = None
    if bc is None:
        b = assemble_rhs(recon, f)
    else:
        b, offset = assemble_rhs_inhomogeneous(recon, forms, f, bc, mu1, mu2, broken=broken)
    log.info("assembled m=%d n_p=%d nnz(A)=%d", m, A.shape[0], A.nnz)
    return DGSystem(mesh, recon, forms, m, mu1, mu2, A, M, AL, b, offset)
