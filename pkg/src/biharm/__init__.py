"""Reconstructed discontinuous approximation for the clamped biharmonic problem.

Continuous piecewise-linear nodal values are lifted to discontinuous degree-m
polynomials by patch-wise constrained least squares, the biharmonic problem is
discretized by a symmetric interior penalty form on that space, and the linear
systems are preconditioned with multigrid for a low-order penalty matrix.
"""

__version__ = "0.1.0"

from .mesh import Mesh, MeshError, build_unit_mesh, unit_hierarchy, uniform_refine  # noqa: E402
from .recon import ReconstructionError, build_reconstruction  # noqa: E402
from .assemble import BoundaryData, DGSystem, assemble_system, default_penalties  # noqa: E402
from .solver import SolveReport, build_mg, cg, pcg  # noqa: E402

__all__ = [
    "Mesh", "MeshError", "build_unit_mesh", "unit_hierarchy", "uniform_refine",
    "ReconstructionError", "build_reconstruction",
    "BoundaryData", "DGSystem", "assemble_system", "default_penalties",
    "SolveReport", "build_mg", "cg", "pcg",
]
