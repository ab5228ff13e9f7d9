"""Sphere-set proxies for articulated meshes.

Fits a compact set of spheres to a watertight mesh, skins it to a
skeleton, evaluates differentiable self-intersection losses over posed
motions, scores motions with a voxel self-intersection-volume metric
and benchmarks sphere-based against mesh-based collision checking.
"""

__version__ = "0.1.0"

from .mesh import (  # noqa: F401
    Aabb,
    TriangleMesh,
    check_watertight,
    load_mesh,
    mesh_volume,
    normalize_to_unit_sphere,
    save_mesh,
)
