"""Mesh-based self-intersection baseline: BVH candidates, exact
triangle-triangle tests and a penetration penalty.

This is the runtime/memory reference the sphere proxy is compared
against. The penalty is a centroid-to-plane penetration proxy, not any
particular production formula; the benchmark claim it supports is the
cost scaling of BVH construction plus triangle tests, which dominate
mesh-based detection.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .bvh import Bvh, triangles_intersect
from .mesh import TriangleMesh


@dataclass
class MeshSiResult:
    value: float
    colliding_pairs: np.ndarray  # (P, 2) face indices
    peak_memory: int = 0  # bytes, transient allocations of one evaluation
    wall_time: float = 0.0  # seconds
    threads: int = 1


def build_bvh(mesh: TriangleMesh, leaf_size: int = 4) -> Bvh:
    return Bvh(mesh.vertices, mesh.faces, leaf_size=leaf_size)


def _faces_share_vertex(faces: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    fa = faces[pairs[:, 0]]  # (P, 3)
    fb = faces[pairs[:, 1]]
    return (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))


def triangle_pairs_intersecting(
    mesh: TriangleMesh, bvh: Bvh | None = None
) -> np.ndarray:
    """Exactly overlapping non-adjacent face pairs (i < j, lex sorted).

    Candidates come from the BVH self-traversal; faces sharing a vertex
    index are excluded before the exact test.
    """
    bvh = bvh or build_bvh(mesh)
    cand = bvh.self_candidate_pairs()
    if len(cand) == 0:
        return cand
    cand = cand[~_faces_share_vertex(mesh.faces, cand)]
    if len(cand) == 0:
        return cand
    a, b, c = mesh.triangle_corners()
    hit = triangles_intersect(
        a[cand[:, 0]], b[cand[:, 0]], c[cand[:, 0]],
        a[cand[:, 1]], b[cand[:, 1]], c[cand[:, 1]],
    )
    return cand[hit]


def _penetration_terms(mesh: TriangleMesh, pairs: np.ndarray) -> np.ndarray:
    """Squared centroid-plane penetration depth per colliding pair."""
    a, b, c = mesh.triangle_corners()
    normals = np.cross(b - a, c - a)
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    centroids = (a + b + c) / 3.0
    i, j = pairs[:, 0], pairs[:, 1]
    # negative side of the other triangle's plane counts as penetration
    d_ij = np.einsum("pk,pk->p", centroids[i] - a[j], normals[j])
    d_ji = np.einsum("pk,pk->p", centroids[j] - a[i], normals[i])
    depth = np.maximum(-d_ij, 0.0) + np.maximum(-d_ji, 0.0)
    return depth**2


def mesh_si_value(
    mesh: TriangleMesh, bvh: Bvh | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Uninstrumented evaluation: (value, colliding pairs, per-pair terms).

    The per-pair term array is returned so batch callers can keep the
    intermediates alive, the way a training loss graph would.
    """
    pairs = triangle_pairs_intersecting(mesh, bvh)
    if len(pairs) == 0:
        return 0.0, pairs, np.empty(0)
    terms = _penetration_terms(mesh, pairs)
    return float(terms.sum()), pairs, terms


def mesh_si_loss(mesh: TriangleMesh, threads: int = 1) -> MeshSiResult:
    """Instrumented mesh self-intersection penalty for one posed mesh.

    Wall time covers BVH build, candidate collection and the exact
    tests; peak memory is the transient allocation high-water mark of
    that work (tracemalloc, which numpy buffer allocations report to).
    """
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    before, _ = tracemalloc.get_traced_memory()
    t0 = time.perf_counter()
    value, pairs, _ = mesh_si_value(mesh)
    wall = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return MeshSiResult(
        value=value,
        colliding_pairs=pairs,
        peak_memory=max(peak - before, 1),
        wall_time=max(wall, 1e-9),
        threads=threads,
    )
