"""Simplicial meshes of the unit square/cube, face topology and nested refinement.

Vertices are stored as an ``(nv, dim)`` float array and elements as an
``(ne, dim + 1)`` integer array.  Faces are deduplicated ``(dim - 1)``-simplices;
every interior face is owned by the element with the smaller index (``K+``) and
its unit normal points from ``K+`` towards ``K-``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from math import factorial
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for inconsistent element lists or malformed mesh files."""


class Face(NamedTuple):
    vertices: tuple[int, ...]
    diameter: float
    normal: np.ndarray
    owner: int
    neighbor: int | None
    boundary: bool


def _simplex_measure(pts: np.ndarray) -> np.ndarray:
    """Measure of a batch of k-simplices embedded in R^d, ``pts`` is (n, k+1, d)."""
    k = pts.shape[1] - 1
    if k == 0:
        return np.ones(pts.shape[0])
    edges = pts[:, 1:, :] - pts[:, :1, :]
    gram = np.einsum("nid,njd->nij", edges, edges)
    return np.sqrt(np.abs(np.linalg.det(gram))) / factorial(k)


def _diameters(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    return np.sqrt((diff**2).sum(-1)).max(axis=(1, 2))


class Mesh:
    """Conforming simplicial mesh in 2D or 3D.

    Treat instances as immutable; derived topology is computed lazily and
    cached.
    """

    def __init__(self, vertices, elements):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        elements = np.ascontiguousarray(elements, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (nv, 2) or (nv, 3) array")
        dim = vertices.shape[1]
        if elements.ndim != 2 or elements.shape[1] != dim + 1:
            raise MeshError(f"elements must be an (ne, {dim + 1}) array")
        if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise MeshError("element references a vertex out of range")
        self.dim = dim
        self.vertices = vertices
        self.elements = elements
        self.vertices.flags.writeable = False
        self.elements.flags.writeable = False

    def __repr__(self):
        return (f"Mesh(dim={self.dim}, nv={self.num_vertices}, "
                f"ne={self.num_elements}, h={self.h:.4g})")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    # -- element geometry ---------------------------------------------------

    @cached_property
    def element_points(self) -> np.ndarray:
        """Vertex coordinates per element, shape (ne, dim+1, dim)."""
        return self.vertices[self.elements]

    @cached_property
    def volumes(self) -> np.ndarray:
        return _simplex_measure(self.element_points)

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.element_points.mean(axis=1)

    @cached_property
    def element_diameters(self) -> np.ndarray:
        return _diameters(self.element_points)

    @property
    def h(self) -> float:
        return float(self.element_diameters.max())

    @cached_property
    def inradii(self) -> np.ndarray:
        pts = self.element_points
        d = self.dim
        area = np.zeros(self.num_elements)
        for i in range(d + 1):
            idx = [j for j in range(d + 1) if j != i]
            area += _simplex_measure(pts[:, idx, :])
        return d * self.volumes / area

    @property
    def quasi_uniformity(self) -> float:
        """``max_K h_K / min_K rho_K``."""
        return float(self.element_diameters.max() / self.inradii.min())

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Gradients of the P1 hat functions on each element, (ne, dim+1, dim)."""
        pts = self.element_points
        jac = pts[:, 1:, :] - pts[:, :1, :]          # rows are edge vectors
        inv = np.linalg.inv(jac)                      # (ne, d, d)
        g = np.empty_like(pts)
        g[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    # -- topology -----------------------------------------------------------

    @cached_property
    def _faces(self):
        return face_topology(self)

    @property
    def face_vertices(self) -> np.ndarray:
        return self._faces["vertices"]

    @property
    def face_elements(self) -> np.ndarray:
        """(nf, 2) array of (K+, K-); K- is -1 on boundary faces."""
        return self._faces["elements"]

    @property
    def face_normals(self) -> np.ndarray:
        return self._faces["normals"]

    @property
    def face_diameters(self) -> np.ndarray:
        return self._faces["diameters"]

    @property
    def face_measures(self) -> np.ndarray:
        return self._faces["measures"]

    @property
    def boundary_faces(self) -> np.ndarray:
        return self._faces["boundary"]

    @property
    def num_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def faces(self) -> list[Face]:
        out = []
        for f in range(self.num_faces):
            kp, km = self.face_elements[f]
            out.append(Face(tuple(int(v) for v in self.face_vertices[f]),
                            float(self.face_diameters[f]), self.face_normals[f],
                            int(kp), None if km < 0 else int(km),
                            bool(self.boundary_faces[f])))
        return out

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.face_vertices[self.boundary_faces])

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.num_vertices, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def _incidence(self) -> sp.csr_array:
        ne, k = self.elements.shape
        rows = np.repeat(np.arange(ne), k)
        data = np.ones(ne * k)
        return sp.csr_array((data, (rows, self.elements.ravel())),
                            shape=(ne, self.num_vertices))

    @cached_property
    def neighbors(self) -> sp.csr_array:
        """Element adjacency w(K): elements sharing at least one vertex (K included)."""
        b = self._incidence
        w = (b @ b.T).tocsr()
        w.data[:] = 1.0
        w.sort_indices()
        return w

    def neighbors_of(self, k: int) -> np.ndarray:
        w = self.neighbors
        return w.indices[w.indptr[k]:w.indptr[k + 1]]

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique sorted vertex pairs of all element edges."""
        pairs = list(itertools.combinations(range(self.dim + 1), 2))
        e = np.concatenate([self.elements[:, list(p)] for p in pairs])
        e.sort(axis=1)
        return np.unique(e, axis=0)


def face_topology(mesh: Mesh) -> dict:
    """Deduplicate element faces and classify them as interior or boundary.

    Raises
    ------
    MeshError
        If a face is shared by more than two elements.
    """
    d = mesh.dim
    ne = mesh.num_elements
    local = [[j for j in range(d + 1) if j != i] for i in range(d + 1)]
    all_faces = np.concatenate([mesh.elements[:, idx] for idx in local])
    owners = np.tile(np.arange(ne), d + 1)
    keys = np.sort(all_faces, axis=1)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                      return_counts=True)
    inverse = inverse.ravel()
    if counts.max(initial=0) > 2:
        bad = int(np.argmax(counts))
        raise MeshError(f"face {tuple(uniq[bad])} is shared by {counts[bad]} elements")

    nf = len(uniq)
    elems = np.full((nf, 2), -1, dtype=np.int64)
    order = np.lexsort((owners, inverse))
    inv_sorted = inverse[order]
    own_sorted = owners[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv_sorted[1:] != inv_sorted[:-1]
    elems[inv_sorted[first], 0] = own_sorted[first]
    elems[inv_sorted[~first], 1] = own_sorted[~first]

    pts = mesh.vertices[uniq]                     # (nf, d, d)
    if d == 2:
        t = pts[:, 1] - pts[:, 0]
        normals = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        normals = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    outward = pts.mean(axis=1) - mesh.barycenters[elems[:, 0]]
    flip = np.einsum("fd,fd->f", normals, outward) < 0
    normals[flip] *= -1.0

    return {
        "vertices": uniq,
        "elements": elems,
        "normals": normals,
        "diameters": _diameters(pts),
        "measures": _simplex_measure(pts),
        "boundary": elems[:, 1] < 0,
    }


# -- structured generation ----------------------------------------------------

def build_unit_square_mesh(n: int) -> Mesh:
    """Triangulate (0,1)^2 with ``n`` cells per side, each cut along the (0,0)-(1,1) diagonal."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    g = np.linspace(0.0, 1.0, n + 1)
    x, y = np.meshgrid(g, g, indexing="xy")
    vertices = np.column_stack([x.ravel(), y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (i + (n + 1) * j).ravel()
    v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
    tris = np.stack([np.column_stack([v00, v10, v11]),
                     np.column_stack([v00, v11, v01])], axis=1).reshape(-1, 3)
    return Mesh(vertices, tris)


def build_unit_cube_mesh(n: int) -> Mesh:
    """Tetrahedralize (0,1)^3 with the Kuhn/Freudenthal split of each of ``n^3`` cubes.

    Each tetrahedron is listed along its monotone lattice path
    ``c, c+e_a, c+e_a+e_b, c+(1,1,1)``, which makes red refinement reproduce the
    same split on the finer grid.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    g = np.linspace(0.0, 1.0, n + 1)
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    vertices = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    stride = np.array([1, n + 1, (n + 1) ** 2])
    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    base = (i + (n + 1) * j + (n + 1) ** 2 * k).ravel()
    tets = []
    for perm in itertools.permutations(range(3)):
        off = np.zeros(3, dtype=np.int64)
        path = [0]
        for axis in perm:
            off[axis] += 1
            path.append(int(off @ stride))
        tets.append(base[:, None] + np.array(path)[None, :])
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return Mesh(vertices, tets)


def build_unit_mesh(dim: int, n: int) -> Mesh:
    if dim == 2:
        return build_unit_square_mesh(n)
    if dim == 3:
        return build_unit_cube_mesh(n)
    raise ValueError(f"dim must be 2 or 3, got {dim!r}")


# -- refinement ---------------------------------------------------------------

_RED_2D = [(0, 3, 4), (3, 1, 5), (4, 5, 2), (3, 5, 4)]
# Bey's ordering; local indices 0-3 are vertices, 4.. are edge midpoints
_RED_3D = [
    (0, 4, 5, 6), (4, 1, 7, 8), (5, 7, 2, 9), (6, 8, 9, 3),
    (4, 5, 6, 8), (4, 5, 7, 8), (5, 6, 8, 9), (5, 7, 8, 9),
]


def uniform_refine(mesh: Mesh) -> tuple[Mesh, sp.csr_array]:
    """Red-refine every element and return the fine mesh with its prolongation.

    Coarse vertices keep their indices; edge midpoints are appended.  The
    prolongation maps nodal values of a continuous P1 function on the coarse
    mesh to nodal values on the fine mesh.
    """
    d = mesh.dim
    nv = mesh.num_vertices
    edges = mesh.edges
    pairs = list(itertools.combinations(range(d + 1), 2))
    keys = edges[:, 0] * nv + edges[:, 1]
    sorter = np.argsort(keys)
    mids = []
    for a, b in pairs:
        lo = np.minimum(mesh.elements[:, a], mesh.elements[:, b])
        hi = np.maximum(mesh.elements[:, a], mesh.elements[:, b])
        pos = sorter[np.searchsorted(keys, lo * nv + hi, sorter=sorter)]
        mids.append(nv + pos)
    local = np.column_stack([mesh.elements] + mids)
    table = _RED_2D if d == 2 else _RED_3D
    children = np.stack([local[:, list(c)] for c in table], axis=1).reshape(-1, d + 1)
    new_vertices = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    fine = Mesh(np.vstack([mesh.vertices, new_vertices]), children)

    ne_ = len(edges)
    rows = np.concatenate([np.arange(nv), nv + np.arange(ne_), nv + np.arange(ne_)])
    cols = np.concatenate([np.arange(nv), edges[:, 0], edges[:, 1]])
    data = np.concatenate([np.ones(nv), np.full(2 * ne_, 0.5)])
    prolong = sp.csr_array((data, (rows, cols)), shape=(nv + ne_, nv))
    return fine, prolong


@dataclass(frozen=True)
class MeshHierarchy:
    """Nested meshes ``meshes[0] (coarsest) ... meshes[-1] (finest)``.

    ``prolongations[j]`` embeds the P1 space on ``meshes[j]`` into the one on
    ``meshes[j + 1]`` (all nodes); :meth:`interior_prolongation` restricts it
    to interior nodes.
    """
    meshes: tuple
    prolongations: tuple

    @property
    def num_levels(self) -> int:
        return len(self.meshes)

    @property
    def finest(self) -> Mesh:
        return self.meshes[-1]

    def interior_prolongation(self, j: int) -> sp.csr_array:
        p = self.prolongations[j]
        fine, coarse = self.meshes[j + 1], self.meshes[j]
        return p[fine.interior_nodes][:, coarse.interior_nodes].tocsr()


def build_hierarchy(base: Mesh, refinements: int) -> MeshHierarchy:
    meshes = [base]
    prolongs = []
    for _ in range(refinements):
        fine, p = uniform_refine(meshes[-1])
        meshes.append(fine)
        prolongs.append(p)
    return MeshHierarchy(tuple(meshes), tuple(prolongs))


def unit_hierarchy(dim: int, n: int, max_coarse_dofs: int = 200) -> MeshHierarchy:
    """Hierarchy whose finest level matches ``build_unit_mesh(dim, n)``.

    The coarsest level is the first one (halving ``n`` while it stays even)
    with at most ``max_coarse_dofs`` interior nodes.
    """
    n0, levels = int(n), 0
    while (n0 - 1) ** dim > max_coarse_dofs and n0 % 2 == 0 and n0 >= 4:
        n0 //= 2
        levels += 1
    return build_hierarchy(build_unit_mesh(dim, n0), levels)


# -- text I/O -----------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.num_vertices} {mesh.num_elements}\n")
        for p in mesh.vertices:
            fh.write(" ".join(f"{c:.17g}" for c in p) + "\n")
        for e in mesh.elements:
            fh.write(" ".join(str(int(v)) for v in e) + "\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        dim, nv, ne = (int(t) for t in lines[0])
        verts = np.array([[float(t) for t in ln] for ln in lines[1:1 + nv]])
        elems = np.array([[int(t) for t in ln] for ln in lines[1 + nv:1 + nv + ne]],
                         dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if verts.shape != (nv, dim) or elems.shape != (ne, dim + 1):
        raise MeshError(f"malformed mesh file {path}: header does not match body")
    return Mesh(verts, elems)
