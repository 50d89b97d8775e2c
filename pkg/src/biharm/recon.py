"""Patch-wise constrained least-squares reconstruction of degree-m polynomials.

For every element ``K`` the map ``C_K`` sends nodal values on ``I(K)`` to the
orthonormal-basis coefficients of the polynomial that interpolates the values
at the vertices of ``K`` and fits the remaining patch nodes in the least-squares
sense.  Stacking the ``C_K`` gives a sparse operator from nodal vectors to
broken polynomial coefficients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .patch import ElementPatch, build_all_patches, default_nm
from .polyspace import BrokenBasis, LocalBasis, dim_poly, orthonormalize

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
LAMBDA_TOL = 1e-14


class ReconstructionError(np.linalg.LinAlgError):
    """The least-squares problem on some patch is not uniquely solvable."""

    def __init__(self, element, message="collocation nodes are not unisolvent"):
        super().__init__(f"element {element}: {message}")
        self.element = element


@dataclass(frozen=True)
class LocalRecon:
    element: int
    matrix: np.ndarray             # (l, #I(K))
    nodes: tuple[int, ...]
    constraint_positions: tuple[int, ...]


@dataclass(frozen=True)
class ReconStats:
    lambda_mk: np.ndarray          # per element
    lambda_m: float

    @property
    def lambda_mk_min(self) -> float:
        return float(self.lambda_mk.min())


def _constrained_ls(evals: np.ndarray, ncon: int, elements) -> np.ndarray:
    """Batched null-space solve; ``evals`` (g, s, l) with constraint rows first.

    Returns the coefficient maps (g, l, s).
    """
    g, s, l = evals.shape
    ec = evals[:, :ncon, :]
    q, r = np.linalg.qr(np.transpose(ec, (0, 2, 1)), mode="complete")
    r1 = r[:, :ncon, :]
    y = q[:, :, :ncon]
    part = np.zeros((g, l, s))
    part[:, :, :ncon] = y @ np.linalg.inv(np.transpose(r1, (0, 2, 1)))
    if l == ncon:
        return part
    z = q[:, :, ncon:]
    ez = evals @ z
    u, sig, vt = np.linalg.svd(ez, full_matrices=False)
    bad = sig[:, -1] <= RANK_TOL * sig[:, 0]
    if np.any(bad):
        raise ReconstructionError(int(np.asarray(elements)[np.argmax(bad)]))
    pinv = np.transpose(vt, (0, 2, 1)) @ (np.transpose(u, (0, 2, 1)) / sig[:, :, None])
    resid = np.eye(s)[None] - evals @ part
    return part + z @ (pinv @ resid)


def local_reconstruct(basis: LocalBasis, patch: ElementPatch, coords) -> LocalRecon:
    """Constrained least-squares map for a single element.

    ``coords`` are the coordinates of all mesh vertices.
    """
    pts = np.asarray(coords)[list(patch.nodes)]
    evals = basis.evaluate(pts)
    ncon = pts.shape[1] + 1
    mat = _constrained_ls(evals[None], ncon, [patch.element])[0]
    return LocalRecon(patch.element, mat, patch.nodes, tuple(range(ncon)))


def lambda_constants(basis: BrokenBasis, patches) -> ReconStats:
    """Per-element ``(h_K^d sigma_min(B_K))^{-1/2}`` and the global stability constant.

    ``B_K`` is the Gram matrix of basis evaluations at the patch nodes.  The
    singularity test is applied to the scale-free quantity ``h_K^d sigma_min``.
    """
    mesh = basis.mesh
    d = mesh.dim
    lam = np.empty(len(patches))
    for idx, evals in _grouped_evaluations(basis, patches):
        bk = np.transpose(evals, (0, 2, 1)) @ evals
        smin = np.linalg.eigvalsh(bk)[:, 0] * mesh.element_diameters[idx] ** d
        if np.any(smin <= LAMBDA_TOL):
            raise ReconstructionError(int(idx[np.argmin(smin)]),
                                      "evaluation Gram matrix B_K is singular")
        lam[idx] = smin ** -0.5
    depth = np.array([p.depth for p in patches])
    nnodes = np.array([p.num_nodes for p in patches])
    big = float(np.max(1.0 + lam * depth * np.sqrt(nnodes)))
    return ReconStats(lam, big)


def _grouped_evaluations(basis: BrokenBasis, patches):
    """Yield (element indices, basis values at patch nodes) grouped by #I(K)."""
    verts = basis.mesh.vertices
    sizes = np.array([p.num_nodes for p in patches])
    for s in np.unique(sizes):
        idx = np.flatnonzero(sizes == s)
        nodes = np.array([patches[i].nodes for i in idx])
        yield idx, basis.values(idx, verts[nodes])


class ReconOperator:
    """Global reconstruction ``R^m`` on a mesh.

    Attributes
    ----------
    full : csr_array
        (ne*l, nv) map from all nodal values to broken coefficients.
    interior, boundary : csr_array
        Column restrictions to interior / boundary nodes.
    """

    def __init__(self, mesh, basis: BrokenBasis, patches, maps):
        self.mesh = mesh
        self.basis = basis
        self.patches = patches
        self.maps = maps
        self.degree = basis.degree
        l = basis.size
        rows, cols, data = [], [], []
        for k, (patch, mat) in enumerate(zip(patches, maps)):
            s = patch.num_nodes
            rows.append(np.repeat(k * l + np.arange(l), s))
            cols.append(np.tile(np.asarray(patch.nodes), l))
            data.append(mat.ravel())
        shape = (mesh.num_elements * l, mesh.num_vertices)
        self.full = sp.csr_array((np.concatenate(data),
                                  (np.concatenate(rows), np.concatenate(cols))), shape=shape)
        self.interior = self.full[:, mesh.interior_nodes].tocsr()
        self.boundary = self.full[:, mesh.boundary_nodes].tocsr()
        self._stats = None

    @property
    def nm(self) -> int:
        return min(p.num_nodes for p in self.patches)

    def local(self, k: int) -> LocalRecon:
        p = self.patches[k]
        return LocalRecon(k, self.maps[k], p.nodes, tuple(range(self.mesh.dim + 1)))

    @property
    def stats(self) -> ReconStats:
        if self._stats is None:
            self._stats = lambda_constants(self.basis, self.patches)
        return self._stats

    def apply(self, nodal) -> np.ndarray:
        """Broken coefficients (ne, l) from a full nodal vector."""
        return (self.full @ np.asarray(nodal, dtype=float)).reshape(-1, self.basis.size)

    def apply_interior(self, values) -> np.ndarray:
        return (self.interior @ np.asarray(values, dtype=float)).reshape(-1, self.basis.size)

    def vertex_values(self, coeffs) -> np.ndarray:
        """Evaluate broken coefficients at the vertices of their own element, (ne, d+1)."""
        mesh = self.mesh
        elems = np.arange(mesh.num_elements)
        vals = self.basis.values(elems, mesh.element_points)
        return np.einsum("nqi,ni->nq", vals, np.asarray(coeffs).reshape(-1, self.basis.size))


def reconstruction_maps(basis: BrokenBasis, patches) -> list[np.ndarray]:
    maps = [None] * len(patches)
    ncon = basis.mesh.dim + 1
    for idx, evals in _grouped_evaluations(basis, patches):
        mats = _constrained_ls(evals, ncon, idx)
        for j, k in enumerate(idx):
            maps[k] = mats[j]
    return maps


def global_recon_operator(mesh, patches, basis: BrokenBasis) -> ReconOperator:
    return ReconOperator(mesh, basis, patches, reconstruction_maps(basis, patches))


def build_reconstruction(mesh, m: int, nm: int | None = None, *, basis=None,
                         retry_singular: bool = True, adaptive: bool = False,
                         max_retries: int = 5) -> ReconOperator:
    """Patches, local maps and the global operator for degree ``m``.

    A failed unisolvence check triggers a retry with ``N_m`` increased by
    ``dim P_m`` (at most ``max_retries`` times) unless ``retry_singular`` is
    off.  With ``adaptive=True`` the same retry also fires while
    ``Lambda_m > 10 min_K Lambda_{m,K}``.
    """
    if basis is None:
        basis = orthonormalize(mesh, m)
    if nm is None:
        nm = default_nm(mesh.dim, m)
    step = dim_poly(mesh.dim, m)
    retries = max_retries if (retry_singular or adaptive) else 0
    for attempt in range(retries + 1):
        try:
            patches = build_all_patches(mesh, nm)
            op = global_recon_operator(mesh, patches, basis)
        except ReconstructionError as exc:
            if attempt == retries:
                raise
            log.info("%s at N_m=%d, retrying with N_m=%d", exc, nm, nm + step)
            nm += step
            continue
        if adaptive and attempt < retries:
            st = op.stats
            if st.lambda_m > 10.0 * st.lambda_mk_min:
                log.info("Lambda_m=%.3g too large at N_m=%d, retrying", st.lambda_m, nm)
                nm += step
                continue
        return op
    return op
