"""Element patches S(K) and collocation node sets I(K) for the reconstruction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .polyspace import dim_poly


class PatchError(RuntimeError):
    """The patch of an element exhausted the mesh before collecting enough nodes."""

    def __init__(self, element, message):
        super().__init__(f"element {element}: {message}")
        self.element = element


@dataclass(frozen=True)
class ElementPatch:
    element: int
    elements: tuple[int, ...]     # S(K), K first, then in order of inclusion
    nodes: tuple[int, ...]        # I(K), vertices of K first
    depth: int                    # t_K
    diameter: float               # h_D(K)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def default_nm(dim: int, m: int) -> int:
    return math.ceil(1.5 * dim_poly(dim, m))


def _add_nodes(nodes, seen, verts):
    for v in verts:
        v = int(v)
        if v not in seen:
            seen.add(v)
            nodes.append(v)


def build_patch(mesh, k: int, nm: int) -> ElementPatch:
    """Grow vertex-neighbour rings around element ``k`` until ``nm`` nodes are reached.

    The depth ``t_K`` is the first ring index ``t`` with ``#I_t(K) >= nm``.
    Elements of that last ring are added one at a time in order of barycenter
    distance to ``K`` (ties by element index) until ``#I(K) >= nm``.
    """
    if nm < mesh.dim + 1:
        raise ValueError(f"N_m must be at least dim+1 = {mesh.dim + 1}, got {nm}")
    elems = mesh.elements
    chosen = [int(k)]
    in_patch = {int(k)}
    nodes: list[int] = []
    seen: set[int] = set()
    _add_nodes(nodes, seen, elems[k])
    depth = 0
    frontier = [int(k)]
    while len(nodes) < nm:
        ring = set()
        for j in frontier:
            ring.update(int(i) for i in mesh.neighbors_of(j))
        ring -= in_patch
        if not ring:
            raise PatchError(k, f"patch covers the whole mesh with {len(nodes)} < N_m={nm} nodes")
        depth += 1
        ring = sorted(ring)
        ring_nodes = set(seen)
        for j in ring:
            ring_nodes.update(int(v) for v in elems[j])
        if len(ring_nodes) < nm:
            chosen.extend(ring)
            in_patch.update(ring)
            for j in ring:
                _add_nodes(nodes, seen, elems[j])
            frontier = ring
            continue
        dist = np.linalg.norm(mesh.barycenters[ring] - mesh.barycenters[k], axis=1)
        for idx in np.lexsort((ring, dist)):
            j = ring[idx]
            chosen.append(j)
            in_patch.add(j)
            _add_nodes(nodes, seen, elems[j])
            if len(nodes) >= nm:
                break
    pts = mesh.vertices[nodes]
    diam = float(np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)).max())
    return ElementPatch(int(k), tuple(chosen), tuple(nodes), depth, diam)


def build_all_patches(mesh, nm: int) -> list[ElementPatch]:
    return [build_patch(mesh, k, nm) for k in range(mesh.num_elements)]


def patch_summary(patches) -> dict:
    ns = np.array([p.num_elements for p in patches])
    ni = np.array([p.num_nodes for p in patches])
    t = np.array([p.depth for p in patches])
    return {
        "num_elements_min": int(ns.min()), "num_elements_max": int(ns.max()),
        "num_nodes_min": int(ni.min()), "num_nodes_max": int(ni.max()),
        "depth_max": int(t.max()), "depth_mean": float(t.mean()),
    }


def dump_patch_stats(patches, path, lambdas=None) -> None:
    """Write per-element #S, #I, t_K (and Lambda_{m,K} when given) as JSON."""
    rows = []
    for i, p in enumerate(patches):
        row = {"element": p.element, "num_elements": p.num_elements,
               "num_nodes": p.num_nodes, "depth": p.depth}
        if lambdas is not None:
            row["lambda_mk"] = float(lambdas[i])
        rows.append(row)
    with open(path, "w") as fh:
        json.dump({"summary": patch_summary(patches), "elements": rows}, fh, indent=1)
