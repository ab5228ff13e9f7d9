"""Skeleton, poses, linear blend skinning and keypoint rotation recovery.

Quaternions are unit, scalar-first (w, x, y, z). Forward kinematics
composes G_j = G_parent * T(rest offset) * R(local rotation); the root
additionally carries a translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateBone,
    DimensionMismatch,
    MissingBlendWeights,
)
from .mesh import TriangleMesh
from .proxy import SphereSet

# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for a unit quaternion: shape (4, 3, 3)."""
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1, dtype=np.float64), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2, dtype=np.float64), -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _any_perpendicular(v: np.ndarray) -> np.ndarray:
    # deterministic unit vector orthogonal to v
    probe = np.zeros(3)
    probe[np.argmin(np.abs(v))] = 1.0
    p = np.cross(v, probe)
    return p / np.linalg.norm(p)


def minimal_rotation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest-angle unit quaternion with R(q) u_dir = v_dir."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    axis = np.cross(u, v)
    s = np.linalg.norm(axis)
    c = float(np.dot(u, v))
    if s < 1e-12:
        if c > 0.0:
            return np.array([1.0, 0.0, 0.0, 0.0])
        # antipodal: 180 degrees about any perpendicular axis
        perp = _any_perpendicular(u)
        return np.concatenate([[0.0], perp])
    angle = np.arctan2(s, c)
    return quat_from_axis_angle(axis, angle)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Skeleton:
    """Joint tree: parent indices (root = -1) and rest joint positions."""

    parents: np.ndarray  # (J,)
    rest_joints: np.ndarray  # (J, 3)

    def __post_init__(self):
        self.parents = np.ascontiguousarray(self.parents, dtype=np.int64)
        self.rest_joints = np.ascontiguousarray(
            self.rest_joints, dtype=np.float64
        )
        j = len(self.parents)
        if self.rest_joints.shape != (j, 3):
            raise DimensionMismatch("rest_joints must be (J, 3)")
        roots = np.nonzero(self.parents < 0)[0]
        if len(roots) != 1:
            raise ConfigError(f"skeleton needs exactly one root, found {len(roots)}")
        self.root = int(roots[0])
        # topological order by walking up; also detects cycles
        order: list[int] = []
        state = np.zeros(j, dtype=np.int8)  # 0 new, 1 visiting, 2 done

        def visit(node: int) -> None:
            chain = []
            while node >= 0 and state[node] == 0:
                state[node] = 1
                chain.append(node)
                node = int(self.parents[node])
            if node >= 0 and state[node] == 1:
                raise ConfigError("skeleton parent graph has a cycle")
            for n in reversed(chain):
                state[n] = 2
                order.append(n)

        for node in range(j):
            visit(node)
        self.topo_order = np.array(order, dtype=np.int64)
        self.children: list[list[int]] = [[] for _ in range(j)]
        for node, par in enumerate(self.parents):
            if par >= 0:
                self.children[par].append(node)
        # bone driving recovery: the first child by index
        self.designated_child = np.array(
            [c[0] if c else -1 for c in self.children], dtype=np.int64
        )
        offsets = self.rest_joints - self.rest_joints[self.parents]
        offsets[self.root] = self.rest_joints[self.root]
        self.rest_offsets = offsets
        lengths = np.linalg.norm(offsets, axis=1)
        lengths[self.root] = 1.0
        if np.any(lengths <= 0.0):
            raise ConfigError("zero-length rest bone")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "parents": self.parents.tolist(),
                    "rest_joints": self.rest_joints.tolist(),
                },
                fh,
            )

    @classmethod
    def from_json(cls, path: str | Path) -> "Skeleton":
        with open(path) as fh:
            data = json.load(fh)
        return cls(np.asarray(data["parents"]), np.asarray(data["rest_joints"]))


@dataclass
class Pose:
    """Local joint rotations (unit quaternions) plus a root translation."""

    quats: np.ndarray  # (J, 4) wxyz
    root_t: np.ndarray  # (3,)

    def __post_init__(self):
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64)
        self.root_t = np.ascontiguousarray(self.root_t, dtype=np.float64)
        if self.quats.ndim != 2 or self.quats.shape[1] != 4:
            raise DimensionMismatch("quats must be (J, 4)")
        if self.root_t.shape != (3,):
            raise DimensionMismatch("root_t must be (3,)")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ConfigError("pose quaternions must be unit norm")

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        q = np.zeros((n_joints, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3))


@dataclass
class Motion:
    """Pose sequence stored packed: quats (N, J, 4), root_t (N, 3)."""

    quats: np.ndarray
    root_t: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64)
        self.root_t = np.ascontiguousarray(self.root_t, dtype=np.float64)
        if self.quats.ndim != 3 or self.quats.shape[2] != 4:
            raise DimensionMismatch("motion quats must be (N, J, 4)")
        if self.root_t.shape != (len(self.quats), 3):
            raise DimensionMismatch("motion root_t must be (N, 3)")
        if len(self.quats) < 1:
            raise ConfigError("motion needs at least one frame")

    def __len__(self) -> int:
        return len(self.quats)

    @property
    def n_joints(self) -> int:
        return self.quats.shape[1]

    def pose(self, i: int) -> Pose:
        return Pose(self.quats[i], self.root_t[i])

    def subsample(self, indices) -> "Motion":
        return Motion(self.quats[indices], self.root_t[indices], fps=self.fps)

    @classmethod
    def from_poses(cls, poses: list[Pose], fps: float = 20.0) -> "Motion":
        return cls(
            np.stack([p.quats for p in poses]),
            np.stack([p.root_t for p in poses]),
            fps=fps,
        )

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "fps": self.fps,
                    "frames": [
                        {
                            "root_t": self.root_t[i].tolist(),
                            "quats": self.quats[i].tolist(),
                        }
                        for i in range(len(self))
                    ],
                },
                fh,
            )

    @classmethod
    def from_json(cls, path: str | Path) -> "Motion":
        with open(path) as fh:
            data = json.load(fh)
        frames = data["frames"]
        return cls(
            np.asarray([f["quats"] for f in frames], dtype=np.float64),
            np.asarray([f["root_t"] for f in frames], dtype=np.float64),
            fps=float(data.get("fps", 20.0)),
        )


def load_keypoints_json(path: str | Path) -> tuple[np.ndarray, float]:
    """Keypoint motion file: {"fps": f, "frames": [[[x,y,z] * J], ...]}."""
    with open(path) as fh:
        data = json.load(fh)
    return (
        np.asarray(data["frames"], dtype=np.float64),
        float(data.get("fps", 20.0)),
    )


def save_keypoints_json(
    positions: np.ndarray, path: str | Path, fps: float = 20.0
) -> None:
    with open(path, "w") as fh:
        json.dump({"fps": fps, "frames": positions.tolist()}, fh)


@dataclass
class SphereBlendWeights:
    """Per-sphere joint weights (S, J), at most 4 nonzeros per row."""

    matrix: np.ndarray
    dominant_joint: np.ndarray  # (S,)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        self.dominant_joint = np.ascontiguousarray(
            self.dominant_joint, dtype=np.int64
        )
        if self.matrix.ndim != 2:
            raise DimensionMismatch("blend weight matrix must be (S, J)")
        if self.dominant_joint.shape != (len(self.matrix),):
            raise DimensionMismatch("dominant_joint must be (S,)")
        if np.any(self.matrix < -1e-12):
            raise ConfigError("negative sphere blend weight")
        sums = self.matrix.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ConfigError("sphere blend weight rows must sum to 1")
        if np.any((self.matrix > 0).sum(axis=1) > 4):
            raise ConfigError("more than 4 nonzero weights in a row")

    @property
    def n_spheres(self) -> int:
        return len(self.matrix)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "matrix": self.matrix.tolist(),
                    "dominant_joint": self.dominant_joint.tolist(),
                },
                fh,
            )

    @classmethod
    def from_json(cls, path: str | Path) -> "SphereBlendWeights":
        with open(path) as fh:
            data = json.load(fh)
        return cls(
            np.asarray(data["matrix"], dtype=np.float64),
            np.asarray(data["dominant_joint"], dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# Blend weight construction
# ---------------------------------------------------------------------------


def _top4_rows(matrix: np.ndarray) -> np.ndarray:
    """Keep the 4 largest entries per row and renormalize."""
    out = np.zeros_like(matrix)
    if matrix.shape[1] <= 4:
        out[:] = matrix
    else:
        keep = np.argpartition(matrix, -4, axis=1)[:, -4:]
        rows = np.arange(len(matrix))[:, None]
        out[rows, keep] = matrix[rows, keep]
    return out / out.sum(axis=1, keepdims=True)


def derive_sphere_blend_weights(
    spheres: SphereSet, mesh: TriangleMesh, g: int = 8
) -> SphereBlendWeights:
    """Average the weight rows of the g vertices nearest each sphere surface.

    Nearness is measured to the sphere surface (|v - z| - r), the mean
    row is truncated to its top-4 entries and renormalized; ties for the
    dominant joint break toward the lower joint index.
    """
    if mesh.blend_weights is None:
        raise MissingBlendWeights("mesh carries no blend weights")
    if g < 1:
        raise ConfigError("g must be >= 1")
    g = min(g, mesh.n_vertices)
    dist = (
        np.linalg.norm(
            mesh.vertices[None, :, :] - spheres.centers[:, None, :], axis=2
        )
        - spheres.radii[:, None]
    )  # (S, V)
    nearest = np.argpartition(dist, g - 1, axis=1)[:, :g]
    rows = mesh.blend_weights[nearest].mean(axis=1)  # (S, J)
    matrix = _top4_rows(rows)
    return SphereBlendWeights(matrix, np.argmax(matrix, axis=1))


def average_blend_weights(
    weights: list[SphereBlendWeights],
) -> SphereBlendWeights:
    """Mean blend weight matrix over assets, re-truncated to top-4 rows."""
    if not weights:
        raise ConfigError("nothing to average")
    shapes = {w.matrix.shape for w in weights}
    if len(shapes) != 1:
        raise DimensionMismatch(f"matrix shapes differ: {shapes}")
    mean = np.mean([w.matrix for w in weights], axis=0)
    matrix = _top4_rows(mean)
    return SphereBlendWeights(matrix, np.argmax(matrix, axis=1))


# ---------------------------------------------------------------------------
# Forward kinematics and skinning
# ---------------------------------------------------------------------------


def pose_joints(
    skeleton: Skeleton, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Global joint transforms: rotations (J, 3, 3) and positions (J, 3)."""
    local = quat_to_matrix(pose.quats)
    rot = np.empty_like(local)
    pos = np.empty_like(skeleton.rest_joints)
    for j in skeleton.topo_order:
        par = skeleton.parents[j]
        if par < 0:
            rot[j] = local[j]
            pos[j] = skeleton.rest_offsets[j] + pose.root_t
        else:
            rot[j] = rot[par] @ local[j]
            pos[j] = pos[par] + rot[par] @ skeleton.rest_offsets[j]
    return rot, pos


def skinning_transforms(
    skeleton: Skeleton, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint rest-to-posed transforms: x -> A_rot[j] x + A_t[j]."""
    rot, pos = pose_joints(skeleton, pose)
    a_t = pos - np.einsum("jab,jb->ja", rot, skeleton.rest_joints)
    return rot, a_t


def lbs_points(
    points: np.ndarray,
    weights: np.ndarray,
    skeleton: Skeleton,
    pose: Pose,
) -> np.ndarray:
    """Linear blend skinning of rest-space points (N, 3) with (N, J) weights."""
    if weights.shape != (len(points), skeleton.n_joints):
        raise DimensionMismatch(
            f"weights {weights.shape} incompatible with "
            f"{len(points)} points and J={skeleton.n_joints}"
        )
    rot, a_t = skinning_transforms(skeleton, pose)
    per_joint = np.einsum("jab,nb->nja", rot, points) + a_t[None, :, :]
    return np.einsum("nj,nja->na", weights, per_joint)


def pose_spheres(
    spheres: SphereSet,
    bw: SphereBlendWeights,
    skeleton: Skeleton,
    pose: Pose,
) -> SphereSet:
    """LBS on sphere centers; radii move rigidly."""
    if bw.n_spheres != spheres.count:
        raise DimensionMismatch(
            f"{bw.n_spheres} weight rows for {spheres.count} spheres"
        )
    centers = lbs_points(spheres.centers, bw.matrix, skeleton, pose)
    return SphereSet(centers, spheres.radii.copy())


def pose_mesh(mesh: TriangleMesh, skeleton: Skeleton, pose: Pose) -> TriangleMesh:
    """LBS on mesh vertices using the mesh's own blend weights."""
    if mesh.blend_weights is None:
        raise MissingBlendWeights("mesh carries no blend weights")
    return mesh.with_vertices(
        lbs_points(mesh.vertices, mesh.blend_weights, skeleton, pose)
    )


# ---------------------------------------------------------------------------
# Rotation recovery from keypoints
# ---------------------------------------------------------------------------


def recover_rotations_from_keypoints(
    skeleton: Skeleton, joint_positions: np.ndarray, fps: float = 20.0
) -> Motion:
    """Per-frame local rotations from observed joint positions.

    Each joint's rotation is the minimal rotation aligning its rest bone
    (joint to designated child, expressed in the parent frame) with the
    observed bone; leaves stay at identity, so bone twist is fixed to
    zero, which is all that joint positions determine. Re-posing the
    skeleton with the result reproduces the inputs for single-child
    chains.
    """
    positions = np.asarray(joint_positions, dtype=np.float64)
    if positions.ndim == 2:
        positions = positions[None]
    n, j, _ = positions.shape
    if j != skeleton.n_joints:
        raise DimensionMismatch(
            f"positions carry {j} joints, skeleton has {skeleton.n_joints}"
        )
    quats = np.zeros((n, j, 4))
    quats[..., 0] = 1.0
    roots = positions[:, skeleton.root] - skeleton.rest_joints[skeleton.root]

    for f in range(n):
        rot = np.empty((j, 3, 3))
        for jt in skeleton.topo_order:
            par = skeleton.parents[jt]
            parent_rot = np.eye(3) if par < 0 else rot[par]
            child = skeleton.designated_child[jt]
            if child < 0:
                q = np.array([1.0, 0.0, 0.0, 0.0])
            else:
                observed = positions[f, child] - positions[f, jt]
                length = np.linalg.norm(observed)
                if length < 1e-9:
                    raise DegenerateBone(
                        f"frame {f}: bone {jt}->{child} has zero length"
                    )
                rest_dir = skeleton.rest_offsets[child]
                q = minimal_rotation(rest_dir, parent_rot.T @ observed)
            quats[f, jt] = q
            rot[jt] = parent_rot @ quat_to_matrix(q)
    return Motion(quats, roots, fps=fps)
