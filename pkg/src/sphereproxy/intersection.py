"""Pair-mask calibration and the differentiable self-intersection loss.

The loss over a motion is the mean over frames of the summed squared
overlap depths of the retained sphere pairs W. W drops pairs that share
a dominant joint and pairs that intersect in more than a threshold
fraction of calibration poses (body-model contact that should not be
penalized).

Gradients are hand-derived: squared overlaps are C^1 at the contact
boundary, so d(b^2) flows only through overlapping pairs; pose gradients
chain through linear blend skinning and the quaternion-to-matrix
Jacobian, with blend weights treated as constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyCalibration,
    MaskMismatch,
    ShapeMismatch,
)
from .proxy import SphereSet
from .skinning import (
    Motion,
    Pose,
    Skeleton,
    SphereBlendWeights,
    quat_matrix_jacobian,
    quat_to_matrix,
)


@dataclass
class MaskProvenance:
    threshold: float
    n_poses: int
    n_excluded_frequent: int
    n_excluded_same_joint: int
    n_pairs_total: int
    n_always_colliding: int
    sphere_count: int

    def always_colliding_fraction(self) -> float:
        return self.n_always_colliding / max(self.n_pairs_total, 1)

    def excluded_fraction(self) -> float:
        return (
            self.n_excluded_frequent + self.n_excluded_same_joint
        ) / max(self.n_pairs_total, 1)


@dataclass
class PairMask:
    """Sphere pairs retained by the self-intersection loss."""

    pairs: np.ndarray  # (P, 2) with i < j, lexicographically sorted
    provenance: MaskProvenance

    def __post_init__(self):
        self.pairs = np.ascontiguousarray(self.pairs, dtype=np.int64).reshape(
            -1, 2
        )
        if len(self.pairs):
            if np.any(self.pairs[:, 0] >= self.pairs[:, 1]):
                raise ConfigError("mask pairs must satisfy i < j")
            order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0]))
            self.pairs = self.pairs[order]
            keys = self.pairs[:, 0] * self.provenance.sphere_count + self.pairs[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise ConfigError("duplicate pair in mask")

    def __len__(self) -> int:
        return len(self.pairs)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {"pairs": self.pairs.tolist(), "provenance": vars(self.provenance)},
                fh,
            )

    @classmethod
    def from_json(cls, path: str | Path) -> "PairMask":
        with open(path) as fh:
            data = json.load(fh)
        return cls(
            np.asarray(data["pairs"], dtype=np.int64).reshape(-1, 2),
            MaskProvenance(**data["provenance"]),
        )


def posed_centers_per_frame(
    spheres: SphereSet,
    bw: SphereBlendWeights,
    skeleton: Skeleton,
    motion: Motion,
) -> np.ndarray:
    """(N, S, 3) posed sphere centers, one frame at a time."""
    from .skinning import pose_spheres

    out = np.empty((len(motion), spheres.count, 3))
    for f in range(len(motion)):
        out[f] = pose_spheres(spheres, bw, skeleton, motion.pose(f)).centers
    return out


def build_pair_mask(
    spheres: SphereSet,
    bw: SphereBlendWeights,
    skeleton: Skeleton,
    calibration_motions: list[Motion],
    threshold: float = 0.9,
) -> PairMask:
    """Scan calibration poses and drop same-joint / near-always pairs.

    A pair counts as intersecting in a pose only for strictly positive
    overlap; tangency does not count. Pairs intersecting in more than
    ``threshold`` of the poses are excluded, as are pairs whose dominant
    joints coincide.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("threshold must be in (0, 1]")
    if bw.n_spheres != spheres.count:
        raise DimensionMismatch(
            f"{bw.n_spheres} weight rows for {spheres.count} spheres"
        )
    n_poses = sum(len(m) for m in calibration_motions)
    if n_poses == 0:
        raise EmptyCalibration("no calibration poses")

    s = spheres.count
    iu, ju = np.triu_indices(s, k=1)
    r_sum = spheres.radii[iu] + spheres.radii[ju]
    counts = np.zeros(len(iu), dtype=np.int64)
    for motion in calibration_motions:
        centers = posed_centers_per_frame(spheres, bw, skeleton, motion)
        for f in range(len(motion)):
            gap = np.linalg.norm(centers[f, iu] - centers[f, ju], axis=1)
            counts += (r_sum - gap) > 0.0

    same_joint = bw.dominant_joint[iu] == bw.dominant_joint[ju]
    frequent = counts > threshold * n_poses
    excluded = same_joint | frequent
    pairs = np.stack([iu[~excluded], ju[~excluded]], axis=1)
    provenance = MaskProvenance(
        threshold=threshold,
        n_poses=n_poses,
        n_excluded_frequent=int((frequent & ~same_joint).sum()),
        n_excluded_same_joint=int(same_joint.sum()),
        n_pairs_total=len(iu),
        n_always_colliding=int((counts == n_poses).sum()),
        sphere_count=s,
    )
    return PairMask(pairs, provenance)


# ---------------------------------------------------------------------------
# Self-intersection loss
# ---------------------------------------------------------------------------


@dataclass
class SiLossResult:
    value: float
    per_frame: np.ndarray  # (N,) per-frame pair sums (mean of these = value)
    grad_centers: np.ndarray | None = None  # (N, S, 3) wrt posed centers
    grad_quats: np.ndarray | None = None  # (N, J, 4)
    grad_root: np.ndarray | None = None  # (N, 3)

    def pose_gradient_flat(self) -> np.ndarray:
        """(N, 4J + 3): per frame, quats row-major then root translation."""
        if self.grad_quats is None or self.grad_root is None:
            raise ConfigError("loss was evaluated without pose gradients")
        n = len(self.grad_quats)
        return np.concatenate(
            [self.grad_quats.reshape(n, -1), self.grad_root], axis=1
        )

    def to_json_dict(self) -> dict:
        out: dict = {
            "value": self.value,
            "per_frame": self.per_frame.tolist(),
        }
        if self.grad_centers is not None:
            out["grad_centers"] = self.grad_centers.tolist()
        if self.grad_quats is not None:
            out["grad_quats"] = self.grad_quats.tolist()
            out["grad_root"] = self.grad_root.tolist()
        return out


def _frame_pair_terms(centers, radii, pairs, cell_size, prune):
    """Overlaps for one frame restricted to candidate pairs.

    Returns (candidate pair array, gap, overlap). With pruning, pairs
    whose centers land more than one broad-phase cell apart are skipped;
    they cannot overlap because the cell edge is 2 * max radius.
    """
    if prune and len(pairs):
        cells = np.floor(centers / cell_size).astype(np.int64)
        near = (
            np.abs(cells[pairs[:, 0]] - cells[pairs[:, 1]]).max(axis=1) <= 1
        )
        cand = pairs[near]
    else:
        cand = pairs
    if not len(cand):
        return cand, np.empty(0), np.empty(0)
    diff = centers[cand[:, 0]] - centers[cand[:, 1]]
    gap = np.linalg.norm(diff, axis=1)
    overlap = np.maximum(radii[cand[:, 0]] + radii[cand[:, 1]] - gap, 0.0)
    return cand, gap, overlap


def si_loss(
    spheres: SphereSet,
    bw: SphereBlendWeights,
    skeleton: Skeleton,
    motion: Motion,
    mask: PairMask,
    want_grad_centers: bool = False,
    want_grad_pose: bool = False,
    prune: bool = True,
) -> SiLossResult:
    """Mean over frames of the summed squared pair overlaps on W."""
    if mask.provenance.sphere_count != spheres.count:
        raise MaskMismatch(
            f"mask built for {mask.provenance.sphere_count} spheres, "
            f"got {spheres.count}"
        )
    if bw.n_spheres != spheres.count:
        raise DimensionMismatch(
            f"{bw.n_spheres} weight rows for {spheres.count} spheres"
        )
    if motion.n_joints != skeleton.n_joints:
        raise DimensionMismatch(
            f"motion has {motion.n_joints} joints, skeleton {skeleton.n_joints}"
        )

    n = len(motion)
    s = spheres.count
    j = skeleton.n_joints
    pairs = mask.pairs
    cell = 2.0 * float(spheres.radii.max())
    w = bw.matrix
    rest = skeleton.rest_joints
    zmt = spheres.centers[:, None, :] - rest[None, :, :]  # (S, J, 3)

    per_frame = np.zeros(n)
    grad_centers = np.zeros((n, s, 3)) if (want_grad_centers or want_grad_pose) else None
    grad_quats = np.zeros((n, j, 4)) if want_grad_pose else None
    grad_root = np.zeros((n, 3)) if want_grad_pose else None

    for f in range(n):
        pose = motion.pose(f)
        local = quat_to_matrix(pose.quats)  # (J, 3, 3)
        rot = np.empty_like(local)
        pos = np.empty((j, 3))
        for jt in skeleton.topo_order:
            par = skeleton.parents[jt]
            if par < 0:
                rot[jt] = local[jt]
                pos[jt] = skeleton.rest_offsets[jt] + pose.root_t
            else:
                rot[jt] = rot[par] @ local[jt]
                pos[jt] = pos[par] + rot[par] @ skeleton.rest_offsets[jt]
        a_t = pos - np.einsum("jab,jb->ja", rot, rest)
        centers = (
            np.einsum("ij,jab,ib->ia", w, rot, spheres.centers)
            + w @ a_t
        )

        cand, gap, overlap = _frame_pair_terms(
            centers, spheres.radii, pairs, cell, prune
        )
        per_frame[f] = float((overlap**2).sum())

        if grad_centers is None:
            continue
        g = np.zeros((s, 3))
        act = (overlap > 0.0) & (gap > 0.0)
        if np.any(act):
            ai = cand[act, 0]
            aj = cand[act, 1]
            unit = (centers[ai] - centers[aj]) / gap[act, None]
            coeff = 2.0 * overlap[act, None] / n  # d(value)/d b, incl. 1/N
            np.add.at(g, ai, -coeff * unit)
            np.add.at(g, aj, coeff * unit)
        grad_centers[f] = g

        if not want_grad_pose:
            continue
        # backprop through LBS into the per-joint global transforms
        d_rot = np.einsum("ij,ia,ijb->jab", w, g, zmt)  # (J, 3, 3)
        d_pos = w.T @ g  # (J, 3)
        d_local = np.empty_like(d_rot)
        for jt in skeleton.topo_order[::-1]:
            par = skeleton.parents[jt]
            if par < 0:
                d_local[jt] = d_rot[jt]
                grad_root[f] = d_pos[jt]
            else:
                d_local[jt] = rot[par].T @ d_rot[jt]
                d_rot[par] += d_rot[jt] @ local[jt].T + np.outer(
                    d_pos[jt], skeleton.rest_offsets[jt]
                )
                d_pos[par] += d_pos[jt]
        for jt in range(j):
            jac = quat_matrix_jacobian(pose.quats[jt])  # (4, 3, 3)
            raw = np.einsum("qab,ab->q", jac, d_local[jt])
            q = pose.quats[jt]
            grad_quats[f, jt] = raw - q * np.dot(q, raw)

    value = float(per_frame.mean())
    return SiLossResult(
        value=value,
        per_frame=per_frame,
        grad_centers=grad_centers if want_grad_centers else None,
        grad_quats=grad_quats,
        grad_root=grad_root,
    )


def total_training_loss(
    task_loss: tuple[float, np.ndarray],
    si: SiLossResult,
    lambda_si: float,
) -> tuple[float, np.ndarray]:
    """Combine a host training loss with the self-intersection term.

    Pure combinator: value is task + lambda * si, gradients are summed
    elementwise over the flat pose layout of SiLossResult.
    """
    task_value, task_grad = task_loss
    task_grad = np.asarray(task_grad, dtype=np.float64)
    if lambda_si == 0.0:
        return float(task_value), task_grad
    si_grad = si.pose_gradient_flat()
    if task_grad.shape != si_grad.shape:
        raise ShapeMismatch(
            f"task gradient {task_grad.shape} vs "
            f"self-intersection gradient {si_grad.shape}"
        )
    return float(task_value + lambda_si * si.value), task_grad + lambda_si * si_grad
