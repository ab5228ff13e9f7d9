"""Signed-distance queries and SDF sample sets for sphere fitting."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .bvh import Bvh
from .errors import ConfigError, ParseError, SignUndecided
from .mesh import TriangleMesh

AMBIENT = 0
SURFACE = 1
DETAIL = 2

TAG_NAMES = {AMBIENT: "ambient", SURFACE: "surface", DETAIL: "detail"}

_CACHE_MAGIC = b"SDFS"
_CACHE_VERSION = 1
_RECORD_DTYPE = np.dtype(
    [("p", "<f8", (3,)), ("d", "<f8"), ("tag", "u1")]
)

# how often a sign vote may be re-cast before giving up
_MAX_SIGN_ROUNDS = 8


class SdfQuery:
    """Distance/sign oracle for one mesh; builds its BVH once."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        self.bvh = Bvh(mesh.vertices, mesh.faces)
        box = mesh.aabb()
        self.center = box.center
        self.radius = float(
            np.linalg.norm(mesh.vertices - self.center, axis=1).max()
        )

    def unsigned(self, points: np.ndarray) -> np.ndarray:
        """Exact min point-triangle distance over all faces."""
        return self.bvh.closest_distances(points)

    def inside(
        self, points: np.ndarray, n_rays: int = 3, seed: int = 0
    ) -> np.ndarray:
        """Ray-parity inside test, majority over ``n_rays`` independent casts.

        Rays that graze an edge or vertex are re-cast in a fresh
        direction; after ``_MAX_SIGN_ROUNDS`` re-casts a still undecided
        point raises SignUndecided.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        votes_in = np.zeros(n, dtype=np.int64)
        votes_out = np.zeros(n, dtype=np.int64)
        pending = np.arange(n)
        needed = np.full(n, n_rays, dtype=np.int64)
        for round_idx in range(n_rays + _MAX_SIGN_ROUNDS):
            if not len(pending):
                break
            dirs = _rng.unit_vectors(seed, pending, round_idx, 0xD1CE)
            surplus, grazing = self.bvh.ray_crossings(points[pending], dirs)
            ok = ~grazing
            idx = pending[ok]
            inside_vote = (surplus[ok] % 2) != 0
            np.add.at(votes_in, idx[inside_vote], 1)
            np.add.at(votes_out, idx[~inside_vote], 1)
            needed[idx] -= 1
            pending = pending[(needed[pending] > 0)]
        if len(pending):
            raise SignUndecided(
                f"{len(pending)} points kept grazing after retries"
            )
        tied = votes_in == votes_out
        if np.any(tied):
            # even vote splits happen only for even n_rays or degenerate
            # geometry; one extra odd round settles or fails
            extra = self.inside(points[tied], n_rays=1, seed=seed + 0x7E7)
            decided = votes_in > votes_out
            decided[tied] = extra
            return decided
        return votes_in > votes_out

    def signed(
        self, points: np.ndarray, n_rays: int = 3, seed: int = 0
    ) -> np.ndarray:
        dist = self.unsigned(points)
        sign = np.where(self.inside(points, n_rays=n_rays, seed=seed), -1.0, 1.0)
        return sign * dist


def unsigned_distance(mesh: TriangleMesh, p) -> float | np.ndarray:
    d = SdfQuery(mesh).unsigned(p)
    return float(d[0]) if np.asarray(p).ndim == 1 else d


def signed_distance(
    mesh: TriangleMesh, p, n_rays: int = 3, seed: int = 0
) -> float | np.ndarray:
    d = SdfQuery(mesh).signed(p, n_rays=n_rays, seed=seed)
    return float(d[0]) if np.asarray(p).ndim == 1 else d


# ---------------------------------------------------------------------------
# Sample sets
# ---------------------------------------------------------------------------


@dataclass
class SamplePlan:
    """How many points to draw per region and how to spread them.

    ``surface_sigma`` is the std of the Gaussian offset along the
    surface normal; when``None`` it defaults to 1 % of the mesh
    bounding-sphere radius. Ambient points fill the circumscribing
    sphere scaled by 1.1.
    """

    n_ambient: int
    n_surface: int
    n_detail: int = 0
    surface_sigma: float | None = None
    ambient_scale: float = 1.1

    def validate(self) -> None:
        if min(self.n_ambient, self.n_surface, self.n_detail) < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.n_ambient + self.n_surface + self.n_detail == 0:
            raise ConfigError("sample plan is empty")


@dataclass
class SdfSampleSet:
    """Struct-of-arrays sample storage.

    points: (K, 3) float64
    distances: (K,) float64 signed
    tags: (K,) uint8, one of AMBIENT / SURFACE / DETAIL
    """

    points: np.ndarray
    distances: np.ndarray
    tags: np.ndarray
    source_mesh_id: str = ""
    rng_seed: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float64)
        self.tags = np.ascontiguousarray(self.tags, dtype=np.uint8)
        if not (len(self.points) == len(self.distances) == len(self.tags)):
            raise ConfigError("sample arrays disagree in length")

    def __len__(self) -> int:
        return len(self.points)

    def counts(self) -> dict[str, int]:
        return {
            name: int((self.tags == tag).sum()) for tag, name in TAG_NAMES.items()
        }

    def subset(self, indices: np.ndarray) -> "SdfSampleSet":
        return SdfSampleSet(
            self.points[indices],
            self.distances[indices],
            self.tags[indices],
            source_mesh_id=self.source_mesh_id,
            rng_seed=self.rng_seed,
        )


def sample_sdf_set(
    mesh: TriangleMesh,
    plan: SamplePlan,
    seed: int = 0,
    detail_vertices: np.ndarray | None = None,
    query: SdfQuery | None = None,
    mesh_id: str = "",
) -> SdfSampleSet:
    """Draw the fitting sample set: ambient ball + near-surface points.

    Every sample's randomness is keyed on (seed, global sample index),
    so the result is independent of chunking or thread count.
    """
    plan.validate()
    if detail_vertices is None:
        detail_vertices = mesh.detail_vertices
    if plan.n_detail > 0 and (detail_vertices is None or len(detail_vertices) == 0):
        raise ConfigError("detail samples requested but no detail region given")

    q = query or SdfQuery(mesh)
    sigma = plan.surface_sigma
    if sigma is None:
        sigma = 0.01 * q.radius

    chunks: list[np.ndarray] = []
    tags: list[np.ndarray] = []

    idx0 = 0
    if plan.n_ambient:
        idx = idx0 + np.arange(plan.n_ambient, dtype=np.uint64)
        r = plan.ambient_scale * q.radius * np.cbrt(_rng.uniform01(seed, idx, 1))
        dirs = _rng.unit_vectors(seed, idx, 2)
        chunks.append(q.center + r[:, None] * dirs)
        tags.append(np.full(plan.n_ambient, AMBIENT, dtype=np.uint8))
        idx0 += plan.n_ambient

    areas = mesh.face_areas()
    normals = mesh.face_normals()
    a, b, c = mesh.triangle_corners()

    def near_surface(count: int, start: int, face_pool: np.ndarray) -> np.ndarray:
        idx = start + np.arange(count, dtype=np.uint64)
        cdf = np.cumsum(areas[face_pool])
        cdf /= cdf[-1]
        pick = face_pool[np.searchsorted(cdf, _rng.uniform01(seed, idx, 3))]
        # uniform barycentric via the square-root trick
        r1 = np.sqrt(_rng.uniform01(seed, idx, 4))
        r2 = _rng.uniform01(seed, idx, 5)
        w0 = 1.0 - r1
        w1 = r1 * (1.0 - r2)
        w2 = r1 * r2
        base = (
            w0[:, None] * a[pick] + w1[:, None] * b[pick] + w2[:, None] * c[pick]
        )
        offset = sigma * _rng.normal01(seed, idx, 6)
        return base + offset[:, None] * normals[pick]

    if plan.n_surface:
        pool = np.arange(mesh.n_faces)
        chunks.append(near_surface(plan.n_surface, idx0, pool))
        tags.append(np.full(plan.n_surface, SURFACE, dtype=np.uint8))
        idx0 += plan.n_surface

    if plan.n_detail:
        in_region = np.isin(mesh.faces, detail_vertices).any(axis=1)
        pool = np.nonzero(in_region)[0]
        if len(pool) == 0:
            raise ConfigError("detail region touches no face")
        chunks.append(near_surface(plan.n_detail, idx0, pool))
        tags.append(np.full(plan.n_detail, DETAIL, dtype=np.uint8))
        idx0 += plan.n_detail

    points = np.vstack(chunks)
    dist = q.signed(points, seed=seed)
    return SdfSampleSet(
        points,
        dist,
        np.concatenate(tags),
        source_mesh_id=mesh_id,
        rng_seed=seed,
    )


# ---------------------------------------------------------------------------
# On-disk cache
# ---------------------------------------------------------------------------


def save_sample_cache(samples: SdfSampleSet, path: str | Path) -> None:
    """Binary cache: magic, version, K, seed header + packed LE records."""
    records = np.empty(len(samples), dtype=_RECORD_DTYPE)
    records["p"] = samples.points
    records["d"] = samples.distances
    records["tag"] = samples.tags
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IQQ", _CACHE_VERSION, len(samples), samples.rng_seed))
        fh.write(records.tobytes())


def load_sample_cache(path: str | Path) -> SdfSampleSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise ParseError(f"{path}: not an SDF sample cache")
        version, count, seed = struct.unpack("<IQQ", fh.read(20))
        if version != _CACHE_VERSION:
            raise ParseError(f"{path}: unsupported cache version {version}")
        records = np.frombuffer(fh.read(), dtype=_RECORD_DTYPE, count=count)
    return SdfSampleSet(
        records["p"].copy(),
        records["d"].copy(),
        records["tag"].copy(),
        rng_seed=int(seed),
    )


def save_samples_json(samples: SdfSampleSet, path: str | Path) -> None:
    """Readable export for small sets."""
    with open(path, "w") as fh:
        json.dump(
            {
                "seed": samples.rng_seed,
                "source_mesh_id": samples.source_mesh_id,
                "samples": [
                    {"p": p.tolist(), "d": float(d), "tag": TAG_NAMES[int(t)]}
                    for p, d, t in zip(
                        samples.points, samples.distances, samples.tags
                    )
                ],
            },
            fh,
        )
