"""Multivalued Jacobi fields on minimal submanifolds: Q-point metric tools,
discrete Q-fields, variational solvers and frequency analysis."""

__version__ = "0.1.0"

from .aq_space import QPoint, g_distance, optimal_matching, spread_stats
from .scene_geometry import builtin_scene
from .mesh import build_mesh, disk_mesh, sphere_mesh
from .qfield import DiscreteQField, dirichlet_energy, jac_energy

__all__ = [
    "QPoint", "g_distance", "optimal_matching", "spread_stats", "builtin_scene",
    "build_mesh", "disk_mesh", "sphere_mesh", "DiscreteQField", "dirichlet_energy", "jac_energy",
]
