"""Voxel self-intersection metric and proxy quality metrics.

Each posed mesh is normalized into the unit sphere, the ball is
subdivided into voxels of edge ``v``, and each voxel center gets a
surplus back-face count chi from ray casting: 0 outside, 1 inside a
clean surface, >= 2 inside self-overlapping regions. The score sums
``v^3 * chi`` over voxels with chi >= 2 and averages over frames.

Unit convention: the paper-style scores treat the unit sphere as
radius 1 m and report cubic centimeters, so normalized volumes are
scaled by 1e6. The voxel edge default 0.06 is in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _rng
from .bvh import Bvh
from .errors import ConfigError, RayDegenerate
from .mesh import TriangleMesh, mesh_volume, normalize_to_unit_sphere
from .proxy import SphereSet, sphere_set_sdf

# normalized unit ball treated as 1 m radius, scores in cm^3
CUBIC_CM_PER_UNIT_VOLUME = 1.0e6

_MAX_RAY_ROUNDS = 8
_RAY_CHUNK = 65536


@dataclass
class VoxelGridSpec:
    """Voxel edge length (normalized units), rays per voxel, RNG seed."""

    edge: float = 0.06
    rays: int = 3
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.edge < 2.0:
            raise ConfigError("voxel edge must be in (0, 2)")
        if self.rays < 1:
            raise ConfigError("need at least one ray per voxel")


@dataclass
class SiScore:
    """Mean self-intersection volume in cm^3-equivalent units."""

    mean_volume: float
    per_frame_volumes: np.ndarray
    voxel_count: int


def unit_ball_voxel_centers(edge: float) -> np.ndarray:
    """Centers of the grid voxels whose center lies in the unit sphere."""
    n = int(np.ceil(2.0 / edge))
    coords = -1.0 + (np.arange(n) + 0.5) * edge
    centers = np.stack(
        np.meshgrid(coords, coords, coords, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    return centers[np.einsum("ij,ij->i", centers, centers) <= 1.0]


def surplus_back_count(
    mesh: TriangleMesh,
    points: np.ndarray,
    rays: int = 3,
    seed: int = 0,
    frame_index: int = 0,
    bvh: Bvh | None = None,
) -> np.ndarray:
    """Per point: majority surplus of back-face over front-face ray hits.

    Each point casts ``rays`` rays in independent random directions;
    grazing casts (edge/vertex hits, near-parallel triangles) are
    re-cast with fresh directions, and disagreeing votes trigger extra
    casts. Points still unresolved after the retry budget raise
    RayDegenerate.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tree = bvh or Bvh(mesh.vertices, mesh.faces)
    n = len(points)
    # votes per candidate chi value, offset so negatives stay indexable
    offset = 8
    votes = np.zeros((n, 2 * offset + 1), dtype=np.int64)
    valid = np.zeros(n, dtype=np.int64)
    pending = np.arange(n)

    for round_idx in range(rays + _MAX_RAY_ROUNDS):
        if not len(pending):
            break
        for s in range(0, len(pending), _RAY_CHUNK):
            chunk = pending[s : s + _RAY_CHUNK]
            dirs = _rng.unit_vectors(seed, frame_index, chunk, round_idx)
            surplus, grazing = tree.ray_crossings(points[chunk], dirs)
            ok = ~grazing
            idx = chunk[ok]
            chi = np.clip(surplus[ok] + offset, 0, 2 * offset)
            votes[idx, chi] += 1
            valid[idx] += 1
        pending = pending[valid[pending] < rays]

    if len(pending):
        raise RayDegenerate(
            f"{len(pending)} voxel rays kept grazing after retries"
        )

    top = votes.max(axis=1)
    majority_ok = 2 * top > valid  # strict majority
    if not np.all(majority_ok):
        # split votes: cast extra rays for the stragglers only
        tied = np.nonzero(~majority_ok)[0]
        extra = surplus_back_count(
            mesh,
            points[tied],
            rays=rays + 2,
            seed=seed + 0x5EED,
            frame_index=frame_index,
            bvh=tree,
        )
        out = (np.argmax(votes, axis=1) - offset).astype(np.int64)
        out[tied] = extra
        return out
    return (np.argmax(votes, axis=1) - offset).astype(np.int64)


def si_volume_single(
    mesh: TriangleMesh,
    spec: VoxelGridSpec,
    frame_index: int = 0,
    skip_aabb: bool = True,
) -> tuple[float, dict[int, int]]:
    """Self-intersection volume of one normalized mesh, normalized units.

    The mesh must already fit in the unit sphere (normalize first).
    Voxels outside the mesh AABB are skipped; they cannot be enclosed by
    any surface, so the result is unchanged.
    """
    spec.validate()
    max_norm = np.linalg.norm(mesh.vertices, axis=1).max()
    if max_norm > 1.0 + 1e-6:
        raise ConfigError(
            f"mesh is not normalized (max vertex norm {max_norm:.3f}); "
            f"apply normalize_to_unit_sphere first"
        )
    centers = unit_ball_voxel_centers(spec.edge)
    m_total = len(centers)
    chi = np.zeros(m_total, dtype=np.int64)
    if skip_aabb:
        box = mesh.aabb()
        inside_box = np.all(
            (centers >= box.lo) & (centers <= box.hi), axis=1
        )
    else:
        inside_box = np.ones(m_total, dtype=bool)
    if np.any(inside_box):
        chi[inside_box] = surplus_back_count(
            mesh,
            centers[inside_box],
            rays=spec.rays,
            seed=spec.seed,
            frame_index=frame_index,
        )
    overlapped = chi >= 2
    volume = float(spec.edge**3 * chi[overlapped].sum())
    values, counts = np.unique(chi, return_counts=True)
    summary = {int(v): int(c) for v, c in zip(values, counts)}
    return volume, summary


def si_metric(meshes, spec: VoxelGridSpec) -> SiScore:
    """Mean self-intersection volume over posed meshes, in cm^3.

    Each frame is independently centered and scaled into the unit
    sphere, so the score does not depend on the absolute mesh size.
    """
    spec.validate()
    meshes = list(meshes)
    if not meshes:
        raise ConfigError("need at least one posed mesh")
    per_frame = np.empty(len(meshes))
    for f, mesh in enumerate(meshes):
        normalized, _, _ = normalize_to_unit_sphere(mesh)
        vol, _ = si_volume_single(normalized, spec, frame_index=f)
        per_frame[f] = vol * CUBIC_CM_PER_UNIT_VOLUME
    return SiScore(
        mean_volume=float(per_frame.mean()),
        per_frame_volumes=per_frame,
        voxel_count=len(unit_ball_voxel_centers(spec.edge)),
    )


def mesh_volume_oracle(mesh: TriangleMesh) -> float:
    """Divergence-theorem volume; exact for watertight meshes."""
    return mesh_volume(mesh)


def proxy_quality_metrics(
    spheres: SphereSet, mesh: TriangleMesh, spec: VoxelGridSpec
) -> tuple[float, float]:
    """(Surface, VolDev) for a fitted sphere set.

    Surface sums |proxy sdf| over mesh vertices in mesh units. VolDev
    compares voxel-occupancy volumes of mesh (chi >= 1) and proxy
    (sphere sdf <= 0) after normalizing both with the mesh transform.
    """
    spec.validate()
    surface = float(np.abs(sphere_set_sdf(spheres, mesh.vertices)).sum())

    normalized, scale, center = normalize_to_unit_sphere(mesh)
    norm_spheres = SphereSet(
        (spheres.centers - center) * scale, spheres.radii * scale
    )
    centers = unit_ball_voxel_centers(spec.edge)

    box = normalized.aabb()
    in_box = np.all((centers >= box.lo) & (centers <= box.hi), axis=1)
    chi = np.zeros(len(centers), dtype=np.int64)
    chi[in_box] = surplus_back_count(
        normalized, centers[in_box], rays=spec.rays, seed=spec.seed
    )
    vol_mesh = spec.edge**3 * float((chi >= 1).sum())

    lo = norm_spheres.centers - norm_spheres.radii[:, None]
    hi = norm_spheres.centers + norm_spheres.radii[:, None]
    near = np.all(
        (centers >= lo.min(axis=0)) & (centers <= hi.max(axis=0)), axis=1
    )
    occupied = np.zeros(len(centers), dtype=bool)
    if np.any(near):
        occupied[near] = sphere_set_sdf(norm_spheres, centers[near]) <= 0.0
    vol_proxy = spec.edge**3 * float(occupied.sum())

    if vol_mesh <= 0.0:
        raise ConfigError("mesh occupancy volume is zero; grid too coarse")
    voldev = abs(vol_mesh - vol_proxy) / vol_mesh
    return surface, voldev
