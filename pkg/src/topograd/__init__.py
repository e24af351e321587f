"""Topological-gradient detection of ischemic regions in a monodomain heart model.

The package is organised bottom-up: sparse linear algebra, tetrahedral meshes,
P1 finite elements, the ionic model, inclusions, the forward and adjoint time
steppers, the reconstruction itself, and scenario/file handling with a CLI.
"""
__version__ = "0.1.0"

from .ionic import IonicParams
from .mesh import Mesh, generate_box, generate_ventricle, refine_uniform
from .inclusion import InclusionSpec
from .forward import TimeGrid, solve_background, solve_perturbed
from .reconstruction import reconstruct, topological_gradient

__all__ = ["IonicParams", "Mesh", "generate_box", "generate_ventricle", "refine_uniform",
           "InclusionSpec", "TimeGrid", "solve_background", "solve_perturbed",
           "reconstruct", "topological_gradient", "__version__"]
