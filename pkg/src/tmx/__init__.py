"""Numerical lab for the perturbed Trudinger-Moser functional on planar domains."""

from .fem import Mesh, build_disk_mesh, build_rect_mesh, load_mesh, refine, save_mesh
from .functional import PerturbParams, Variant
from .maximizer import TrudingerMoserMaximizer, maximize, multi_start
from .potential import concentration_level, green_function

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "PerturbParams",
    "TrudingerMoserMaximizer",
    "Variant",
    "build_disk_mesh",
    "build_rect_mesh",
    "concentration_level",
    "green_function",
    "load_mesh",
    "maximize",
    "multi_start",
    "refine",
    "save_mesh",
]
