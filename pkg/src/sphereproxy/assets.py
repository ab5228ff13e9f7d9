"""Synthetic test assets: primitive meshes, an articulated capsule man
and random motions for it.

The capsule man stands in for licensed human body models: a 22-joint
SMPL-like skeleton wrapped in a single watertight surface extracted from
the union of per-bone capsules, with distance-based blend weights and
hand/feet detail regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import ConfigError, NotWatertight
from .mesh import TriangleMesh, check_watertight, mesh_volume
from .skinning import Motion, Skeleton, quat_from_axis_angle, quat_multiply

# ---------------------------------------------------------------------------
# Primitive meshes
# ---------------------------------------------------------------------------


def gen_icosphere(
    radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)
) -> TriangleMesh:
    """Subdivided icosahedron projected onto the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_verts = list(verts)

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(new_verts)
                new_verts.append(m)
            return edge_mid[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(new_verts)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriangleMesh(verts * radius + np.asarray(center), faces)


def gen_capsule(
    radius: float = 0.1,
    length: float = 0.6,
    segments: int = 24,
    rings: int = 8,
    center=(0.0, 0.0, 0.0),
) -> TriangleMesh:
    """Capsule along +y: cylinder of the given length with hemisphere caps."""
    if radius <= 0 or length <= 0:
        raise ConfigError("capsule radius and length must be positive")
    half = length / 2.0
    thetas = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    verts = [np.array([0.0, half + radius, 0.0])]  # top pole
    rows: list[np.ndarray] = []
    # top hemisphere rows (excluding pole), then bottom hemisphere rows
    lat_top = np.linspace(0, np.pi / 2, rings + 1)[1:]
    for lat in lat_top:
        r = radius * np.sin(lat)
        y = half + radius * np.cos(lat)
        rows.append(np.stack([r * np.cos(thetas), np.full_like(thetas, y),
                              r * np.sin(thetas)], axis=1))
    lat_bot = np.linspace(np.pi / 2, np.pi, rings + 1)[:-1]
    for lat in lat_bot:
        r = radius * np.sin(lat)
        y = -half + radius * np.cos(lat)
        rows.append(np.stack([r * np.cos(thetas), np.full_like(thetas, y),
                              r * np.sin(thetas)], axis=1))
    row_start = []
    for row in rows:
        row_start.append(len(verts))
        verts.extend(row)
    bottom_pole = len(verts)
    verts.append(np.array([0.0, -half - radius, 0.0]))

    faces = []
    s0 = row_start[0]
    for k in range(segments):
        faces.append([0, s0 + k, s0 + (k + 1) % segments])
    for r0, r1 in zip(row_start[:-1], row_start[1:]):
        for k in range(segments):
            k1 = (k + 1) % segments
            faces.append([r0 + k, r1 + k, r1 + k1])
            faces.append([r0 + k, r1 + k1, r0 + k1])
    last = row_start[-1]
    for k in range(segments):
        faces.append([last + k, bottom_pole, last + (k + 1) % segments])
    mesh = TriangleMesh(np.asarray(verts) + np.asarray(center), faces)
    if mesh_volume(mesh) < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def gen_two_cubes(edge: float = 1.0, overlap: float = 0.2) -> TriangleMesh:
    """Two axis-aligned cubes sharing a cubic overlap region of side
    ``overlap`` (the second cube is shifted by edge - overlap along the
    space diagonal). The analytic overlap volume/area land in ``meta``.
    """
    if not 0.0 < overlap < edge:
        raise ConfigError("need 0 < overlap < edge")
    corners = np.array(
        [
            [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
            [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3],
        ],
        dtype=np.int64,
    )
    shift = edge - overlap
    verts = np.vstack([corners * edge, corners * edge + shift])
    all_faces = np.vstack([faces, faces + 8])
    return TriangleMesh(
        verts,
        all_faces,
        meta={
            "overlap_volume": overlap**3,
            "overlap_area": 6.0 * overlap**2,
            "edge": edge,
            "overlap": overlap,
        },
    )


# ---------------------------------------------------------------------------
# Capsule man
# ---------------------------------------------------------------------------

# 22-joint humanoid in T-pose, y up, arms along +-x, ~1.75 m tall.
_JOINT_TABLE = [
    # name,        parent, position
    ("pelvis", -1, (0.00, 0.95, 0.00)),
    ("hip_l", 0, (0.09, 0.88, 0.00)),
    ("hip_r", 0, (-0.09, 0.88, 0.00)),
    ("spine1", 0, (0.00, 1.06, 0.00)),
    ("knee_l", 1, (0.10, 0.50, 0.00)),
    ("knee_r", 2, (-0.10, 0.50, 0.00)),
    ("spine2", 3, (0.00, 1.17, 0.00)),
    ("ankle_l", 4, (0.10, 0.10, 0.00)),
    ("ankle_r", 5, (-0.10, 0.10, 0.00)),
    ("spine3", 6, (0.00, 1.28, 0.00)),
    ("foot_l", 7, (0.10, 0.03, 0.13)),
    ("foot_r", 8, (-0.10, 0.03, 0.13)),
    ("neck", 9, (0.00, 1.45, 0.00)),
    ("collar_l", 9, (0.06, 1.40, 0.00)),
    ("collar_r", 9, (-0.06, 1.40, 0.00)),
    ("head", 12, (0.00, 1.58, 0.00)),
    ("shoulder_l", 13, (0.18, 1.42, 0.00)),
    ("shoulder_r", 14, (-0.18, 1.42, 0.00)),
    ("elbow_l", 16, (0.44, 1.42, 0.00)),
    ("elbow_r", 17, (-0.44, 1.42, 0.00)),
    ("wrist_l", 18, (0.68, 1.42, 0.00)),
    ("wrist_r", 19, (-0.68, 1.42, 0.00)),
]

_TORSO_RADIUS = 0.13

# capsules: (driving joint, endpoint a, endpoint b, radius); endpoints are
# joint indices or literal points
_BONE_CAPSULES = [
    (0, 0, 3, 0.13),
    (3, 3, 6, 0.13),
    (6, 6, 9, 0.12),
    (9, 9, 12, 0.08),
    (12, 12, 15, 0.055),
    (15, 15, (0.0, 1.68, 0.0), 0.10),  # head
    (0, 0, 1, 0.09),
    (0, 0, 2, 0.09),
    (1, 1, 4, 0.075),
    (2, 2, 5, 0.075),
    (4, 4, 7, 0.058),
    (5, 5, 8, 0.058),
    (7, 7, 10, 0.05),
    (8, 8, 11, 0.05),
    (10, 10, (0.10, 0.03, 0.20), 0.042),  # toes
    (11, 11, (-0.10, 0.03, 0.20), 0.042),
    (9, 9, 13, 0.075),
    (9, 9, 14, 0.075),
    (13, 13, 16, 0.065),
    (14, 14, 17, 0.065),
    (16, 16, 18, 0.058),
    (17, 17, 19, 0.058),
    (18, 18, 20, 0.048),
    (19, 19, 21, 0.048),
    (20, 20, (0.80, 1.42, 0.0), 0.042),  # hands
    (21, 21, (-0.80, 1.42, 0.0), 0.042),
]

_DETAIL_CAPSULES = [14, 15, 24, 25]  # toes and hands drive detail regions


@dataclass
class ArticulatedAsset:
    mesh: TriangleMesh
    skeleton: Skeleton


def capsule_man_skeleton() -> Skeleton:
    parents = np.array([p for _, p, _ in _JOINT_TABLE], dtype=np.int64)
    joints = np.array([pos for _, _, pos in _JOINT_TABLE], dtype=np.float64)
    return Skeleton(parents, joints)


def _capsule_segments(skeleton: Skeleton):
    segs_a, segs_b, radii, driver = [], [], [], []
    for joint, a, b, r in _BONE_CAPSULES:
        pa = skeleton.rest_joints[a] if isinstance(a, int) else np.asarray(a)
        pb = skeleton.rest_joints[b] if isinstance(b, int) else np.asarray(b)
        segs_a.append(pa)
        segs_b.append(pb)
        radii.append(r)
        driver.append(joint)
    return (
        np.asarray(segs_a),
        np.asarray(segs_b),
        np.asarray(radii),
        np.asarray(driver, dtype=np.int64),
    )


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distances (N, B) from points to segments a[k]..b[k]."""
    ab = b - a  # (B, 3)
    len2 = np.maximum((ab * ab).sum(axis=1), 1e-300)
    ap = points[:, None, :] - a[None, :, :]  # (N, B, 3)
    t = np.clip(np.einsum("nbj,bj->nb", ap, ab) / len2, 0.0, 1.0)
    closest = a[None] + t[:, :, None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def gen_capsule_man(
    resolution: int = 64, weight_sigma: float = 0.035, detail_margin: float = 0.02
) -> ArticulatedAsset:
    """Watertight capsule-union body via marching cubes, with blend weights.

    ``resolution`` is the voxel count along the longest axis of the body
    bounds; 64 yields a surface in the 10k-face range.
    """
    skeleton = capsule_man_skeleton()
    seg_a, seg_b, radii, driver = _capsule_segments(skeleton)

    lo = np.minimum(seg_a, seg_b).min(axis=0) - radii.max() - 0.06
    hi = np.maximum(seg_a, seg_b).max(axis=0) + radii.max() + 0.06
    spacing = float((hi - lo).max()) / resolution
    counts = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[i] + spacing * np.arange(counts[i]) for i in range(3)]
    grid = np.stack(
        np.meshgrid(*axes, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    sdf = (
        (_segment_distances(grid, seg_a, seg_b) - radii[None, :])
        .min(axis=1)
        .reshape(tuple(counts))
    )
    verts, faces, _, _ = measure.marching_cubes(
        sdf, level=0.0, spacing=(spacing,) * 3
    )
    verts = verts + lo
    mesh = TriangleMesh(verts, faces.astype(np.int64))
    if mesh_volume(mesh) < 0:
        mesh = TriangleMesh(verts, faces[:, ::-1].astype(np.int64))
    ok, edges = check_watertight(mesh)
    if not ok:
        raise NotWatertight(
            f"capsule man surface extraction left {len(edges)} open edges; "
            f"raise the resolution"
        )

    # distance-based skinning weights: per driving joint, a Gaussian in
    # the distance outside each of its capsules
    dist_out = np.maximum(
        _segment_distances(mesh.vertices, seg_a, seg_b) - radii[None, :], 0.0
    )
    influence = np.exp(-((dist_out / weight_sigma) ** 2))
    weights = np.zeros((mesh.n_vertices, skeleton.n_joints))
    for k in range(len(driver)):
        weights[:, driver[k]] += influence[:, k]
    from .skinning import _top4_rows

    weights = _top4_rows(weights)

    detail = np.nonzero(
        (dist_out[:, _DETAIL_CAPSULES] < detail_margin).any(axis=1)
    )[0]

    mesh = TriangleMesh(
        mesh.vertices,
        mesh.faces,
        blend_weights=weights,
        detail_vertices=detail,
        meta={
            "kind": "capsule_man",
            "torso_radius": _TORSO_RADIUS,
            "resolution": resolution,
            "joint_names": [name for name, _, _ in _JOINT_TABLE],
        },
    )
    return ArticulatedAsset(mesh, skeleton)


# ---------------------------------------------------------------------------
# Motions
# ---------------------------------------------------------------------------


def random_motion(
    skeleton: Skeleton,
    n_frames: int,
    seed: int = 0,
    amplitude: float = 0.6,
    root_amplitude: float = 0.1,
    fps: float = 20.0,
) -> Motion:
    """Twist-free random poses: each non-leaf joint rotates about a random
    axis perpendicular to its designated child bone."""
    rng = np.random.default_rng(seed)
    quats = np.zeros((n_frames, skeleton.n_joints, 4))
    quats[..., 0] = 1.0
    for j in range(skeleton.n_joints):
        child = skeleton.designated_child[j]
        if child < 0:
            continue
        bone = skeleton.rest_offsets[child]
        bone = bone / np.linalg.norm(bone)
        for f in range(n_frames):
            raw = rng.normal(size=3)
            axis = raw - bone * np.dot(raw, bone)
            norm = np.linalg.norm(axis)
            if norm < 1e-12:
                continue
            angle = rng.uniform(-amplitude, amplitude)
            quats[f, j] = quat_from_axis_angle(axis / norm, angle)
    roots = rng.uniform(-root_amplitude, root_amplitude, size=(n_frames, 3))
    return Motion(quats, roots, fps=fps)


def contact_motion(
    skeleton: Skeleton,
    n_frames: int,
    seed: int = 0,
    wobble: float = 0.08,
    fps: float = 20.0,
) -> Motion:
    """Arms-pressed-to-torso pose with a small oscillation on top.

    Keeps the arm capsules interpenetrating the torso in every frame,
    which is what the collision benchmarks need.
    """
    rng = np.random.default_rng(seed)
    z = np.array([0.0, 0.0, 1.0])
    y = np.array([0.0, 1.0, 0.0])
    base = {}
    # swing arms down and slightly into the body
    base[16] = quat_multiply(
        quat_from_axis_angle(y, 0.35), quat_from_axis_angle(z, -1.75)
    )
    base[17] = quat_multiply(
        quat_from_axis_angle(y, -0.35), quat_from_axis_angle(z, 1.75)
    )
    base[18] = quat_from_axis_angle(z, -0.35)
    base[19] = quat_from_axis_angle(z, 0.35)
    # cross the thighs a little
    base[1] = quat_from_axis_angle(z, -0.18)
    base[2] = quat_from_axis_angle(z, 0.18)

    quats = np.zeros((n_frames, skeleton.n_joints, 4))
    quats[..., 0] = 1.0
    t = np.arange(n_frames) / max(n_frames - 1, 1)
    for j, q in base.items():
        phase = rng.uniform(0, 2 * np.pi)
        for f in range(n_frames):
            osc = wobble * np.sin(2 * np.pi * 2 * t[f] + phase)
            quats[f, j] = quat_multiply(q, quat_from_axis_angle(y, osc))
    roots = np.zeros((n_frames, 3))
    return Motion(quats, roots, fps=fps)
