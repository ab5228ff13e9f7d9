import numpy as np
import pytest

from sphereproxy.errors import (
    ConfigError,
    DegenerateBone,
    MissingBlendWeights,
)
from sphereproxy.mesh import TriangleMesh
from sphereproxy.proxy import SphereSet
from sphereproxy.skinning import (
    Motion,
    Pose,
    Skeleton,
    SphereBlendWeights,
    average_blend_weights,
    derive_sphere_blend_weights,
    lbs_points,
    minimal_rotation,
    pose_joints,
    pose_spheres,
    quat_from_axis_angle,
    quat_matrix_jacobian,
    quat_multiply,
    quat_to_matrix,
    recover_rotations_from_keypoints,
    skinning_transforms,
)

from conftest import cube_mesh


def chain_skeleton(n=4, step=0.5):
    parents = np.arange(-1, n - 1)
    joints = np.stack(
        [np.zeros(n), np.arange(n) * step, np.zeros(n)], axis=1
    )
    return Skeleton(parents, joints)


def random_pose(skeleton, rng, amplitude=0.8):
    quats = []
    for _ in range(skeleton.n_joints):
        axis = rng.normal(size=3)
        quats.append(quat_from_axis_angle(axis, rng.uniform(-amplitude, amplitude)))
    return Pose(np.array(quats), rng.uniform(-0.5, 0.5, size=3))


def test_quat_matrix_jacobian_finite_differences():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    jac = quat_matrix_jacobian(q)
    h = 1e-6
    for k in range(4):
        dq = np.zeros(4)
        dq[k] = h
        fd = (quat_to_matrix(q + dq) - quat_to_matrix(q - dq)) / (2 * h)
        np.testing.assert_allclose(jac[k], fd, atol=1e-7)


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(1)
    q1 = rng.normal(size=4)
    q1 /= np.linalg.norm(q1)
    q2 = rng.normal(size=4)
    q2 /= np.linalg.norm(q2)
    np.testing.assert_allclose(
        quat_to_matrix(quat_multiply(q1, q2)),
        quat_to_matrix(q1) @ quat_to_matrix(q2),
        atol=1e-12,
    )


def test_skeleton_validation():
    with pytest.raises(ConfigError):  # two roots
        Skeleton([-1, -1], np.zeros((2, 3)))
    with pytest.raises(ConfigError):  # cycle
        Skeleton([1, 0], np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    with pytest.raises(ConfigError):  # zero-length bone
        Skeleton([-1, 0], np.zeros((2, 3)))


def test_identity_pose_is_rest(capsule_man):
    skel = capsule_man.skeleton
    rot, pos = pose_joints(skel, Pose.rest(skel.n_joints))
    np.testing.assert_allclose(pos, skel.rest_joints, atol=1e-15)
    np.testing.assert_allclose(rot, np.eye(3)[None].repeat(skel.n_joints, 0))


def test_root_rotation_spins_body_about_root(capsule_man):
    skel = capsule_man.skeleton
    quats = np.zeros((skel.n_joints, 4))
    quats[:, 0] = 1.0
    quats[skel.root] = quat_from_axis_angle([0.0, 1.0, 0.0], np.pi / 2)
    _, pos = pose_joints(skel, Pose(quats, np.zeros(3)))
    r = quat_to_matrix(quats[skel.root])
    root = skel.rest_joints[skel.root]
    expected = (skel.rest_joints - root) @ r.T + root
    np.testing.assert_allclose(pos, expected, atol=1e-12)


def test_fk_matches_homogeneous_composition(capsule_man):
    # oracle: the same recursion with explicit 4x4 matrices
    skel = capsule_man.skeleton
    rng = np.random.default_rng(3)
    pose = random_pose(skel, rng)
    rot, pos = pose_joints(skel, pose)

    mats = {}
    for j in skel.topo_order:
        local = np.eye(4)
        local[:3, :3] = quat_to_matrix(pose.quats[j])
        local[:3, 3] = skel.rest_offsets[j] @ np.eye(3)
        local2 = np.eye(4)
        local2[:3, 3] = skel.rest_offsets[j]
        local2[:3, :3] = np.eye(3)
        step = local2.copy()
        step[:3, :3] = quat_to_matrix(pose.quats[j])
        par = skel.parents[j]
        if par < 0:
            troot = np.eye(4)
            troot[:3, 3] = pose.root_t
            mats[j] = troot @ step
        else:
            mats[j] = mats[par] @ step
    for j in range(skel.n_joints):
        np.testing.assert_allclose(rot[j], mats[j][:3, :3], atol=1e-9)
        np.testing.assert_allclose(pos[j], mats[j][:3, 3], atol=1e-9)


def test_pose_spheres_identity(capsule_man):
    skel = capsule_man.skeleton
    spheres = SphereSet(skel.rest_joints[:8] + 0.01, np.full(8, 0.05))
    w = np.zeros((8, skel.n_joints))
    w[np.arange(8), np.arange(8)] = 1.0
    bw = SphereBlendWeights(w, np.arange(8))
    posed = pose_spheres(spheres, bw, skel, Pose.rest(skel.n_joints))
    np.testing.assert_allclose(posed.centers, spheres.centers, atol=1e-15)
    np.testing.assert_array_equal(posed.radii, spheres.radii)


def test_pose_spheres_one_hot_translation():
    skel = chain_skeleton(3)
    spheres = SphereSet(np.array([[0.0, 0.6, 0.0]]), np.array([0.1]))
    w = np.zeros((1, 3))
    w[0, 0] = 1.0  # rigidly attached to the root
    bw = SphereBlendWeights(w, np.array([0]))
    shift = np.array([0.3, -0.2, 0.5])
    quats = np.zeros((3, 4))
    quats[:, 0] = 1.0
    posed = pose_spheres(spheres, bw, skel, Pose(quats, shift))
    np.testing.assert_allclose(posed.centers[0], spheres.centers[0] + shift, atol=1e-12)


def test_lbs_matches_reference_loop(capsule_man):
    skel = capsule_man.skeleton
    rng = np.random.default_rng(4)
    s = 24
    centers = rng.uniform(-0.3, 0.3, size=(s, 3)) + np.array([0, 1.0, 0])
    radii = np.full(s, 0.04)
    spheres = SphereSet(centers, radii)
    w = rng.uniform(0, 1, size=(s, skel.n_joints))
    # keep 4, normalize
    for row in w:
        drop = np.argsort(row)[:-4]
        row[drop] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    bw = SphereBlendWeights(w, np.argmax(w, axis=1))
    pose = random_pose(skel, rng)
    posed = pose_spheres(spheres, bw, skel, pose)

    rot, a_t = skinning_transforms(skel, pose)
    for i in range(s):
        acc = np.zeros(3)
        for j in range(skel.n_joints):
            acc += w[i, j] * (rot[j] @ centers[i] + a_t[j])
        np.testing.assert_allclose(posed.centers[i], acc, atol=1e-12)


def test_rigid_motion_moves_all_spheres_rigidly(capsule_man):
    skel = capsule_man.skeleton
    rng = np.random.default_rng(5)
    s = 16
    spheres = SphereSet(
        rng.uniform(-0.2, 0.2, size=(s, 3)) + np.array([0, 1.0, 0]),
        np.full(s, 0.05),
    )
    w = rng.dirichlet(np.ones(4), size=s)
    cols = rng.integers(0, skel.n_joints, size=(s, 4))
    mat = np.zeros((s, skel.n_joints))
    for i in range(s):
        for k in range(4):
            mat[i, cols[i, k]] += w[i, k]
    bw = SphereBlendWeights(mat, np.argmax(mat, axis=1))
    pose = random_pose(skel, rng)
    posed = pose_spheres(spheres, bw, skel, pose).centers

    q_rigid = quat_from_axis_angle(rng.normal(size=3), 0.7)
    r_rigid = quat_to_matrix(q_rigid)
    t_rigid = np.array([0.4, 0.1, -0.2])
    root = skel.rest_joints[skel.root]
    new_quats = pose.quats.copy()
    new_quats[skel.root] = quat_multiply(q_rigid, pose.quats[skel.root])
    new_root_t = r_rigid @ (root + pose.root_t) + t_rigid - root
    moved = pose_spheres(
        spheres, bw, skel, Pose(new_quats, new_root_t)
    ).centers
    np.testing.assert_allclose(moved, posed @ r_rigid.T + t_rigid, atol=1e-9)


# -- blend weights ----------------------------------------------------------


def test_derive_weights_one_hot():
    mesh = cube_mesh()
    bw_mesh = np.zeros((8, 5))
    bw_mesh[:, 3] = 1.0
    mesh = TriangleMesh(mesh.vertices, mesh.faces, blend_weights=bw_mesh)
    spheres = SphereSet(np.zeros((1, 3)), np.array([0.2]))
    out = derive_sphere_blend_weights(spheres, mesh, g=8)
    np.testing.assert_allclose(out.matrix[0], bw_mesh[0])
    assert out.dominant_joint[0] == 3


def test_derive_weights_tie_breaks_low_index():
    mesh = cube_mesh()
    bw_mesh = np.zeros((8, 4))
    bw_mesh[:4, 1] = 1.0
    bw_mesh[4:, 2] = 1.0
    mesh = TriangleMesh(mesh.vertices, mesh.faces, blend_weights=bw_mesh)
    spheres = SphereSet(np.zeros((1, 3)), np.array([0.2]))
    out = derive_sphere_blend_weights(spheres, mesh, g=8)
    np.testing.assert_allclose(out.matrix[0], [0.0, 0.5, 0.5, 0.0])
    assert out.dominant_joint[0] == 1  # tie resolved toward the lower index


def test_derive_weights_requires_weights(cube):
    spheres = SphereSet(np.zeros((1, 3)), np.array([0.2]))
    with pytest.raises(MissingBlendWeights):
        derive_sphere_blend_weights(spheres, cube)


def test_derive_weights_capsule_man(capsule_man):
    rng = np.random.default_rng(6)
    mesh, skel = capsule_man.mesh, capsule_man.skeleton
    inside = mesh.vertices[rng.choice(len(mesh.vertices), size=64, replace=False)]
    spheres = SphereSet(inside, np.full(64, 0.03))
    out = derive_sphere_blend_weights(spheres, mesh, g=8)
    assert np.abs(out.matrix.sum(axis=1) - 1.0).max() < 1e-6
    assert ((out.matrix > 0).sum(axis=1) <= 4).all()
    assert len(np.unique(out.dominant_joint)) >= skel.n_joints // 2


def test_average_blend_weights():
    a = SphereBlendWeights(np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([0, 0]))
    b = SphereBlendWeights(np.array([[0.0, 1.0], [0.5, 0.5]]), np.array([1, 0]))
    avg = average_blend_weights([a, b])
    np.testing.assert_allclose(avg.matrix, [[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_array_equal(avg.dominant_joint, [0, 0])


# -- rotation recovery --------------------------------------------------------


def test_recover_rest_pose_is_identity(capsule_man):
    skel = capsule_man.skeleton
    motion = recover_rotations_from_keypoints(
        skel, skel.rest_joints[None, :, :]
    )
    expected = np.zeros((1, skel.n_joints, 4))
    expected[..., 0] = 1.0
    np.testing.assert_allclose(motion.quats, expected, atol=1e-9)
    np.testing.assert_allclose(motion.root_t, 0.0, atol=1e-12)


def test_recover_single_bone_right_angle():
    skel = chain_skeleton(2)
    target = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])  # bone y -> x
    motion = recover_rotations_from_keypoints(skel, target[None])
    q = motion.quats[0, 0]
    angle = 2 * np.arccos(np.clip(abs(q[0]), -1, 1))
    assert angle == pytest.approx(np.pi / 2, abs=1e-6)


def test_recover_degenerate_bone():
    skel = chain_skeleton(2)
    bad = np.zeros((1, 2, 3))
    with pytest.raises(DegenerateBone):
        recover_rotations_from_keypoints(skel, bad)


def test_recover_round_trip_chain():
    from sphereproxy.assets import random_motion

    skel = chain_skeleton(6, step=0.4)
    motion = random_motion(skel, 20, seed=8, amplitude=0.9, root_amplitude=0.3)
    positions = np.stack(
        [pose_joints(skel, motion.pose(i))[1] for i in range(len(motion))]
    )
    recovered = recover_rotations_from_keypoints(skel, positions)
    rebuilt = np.stack(
        [pose_joints(skel, recovered.pose(i))[1] for i in range(len(recovered))]
    )
    assert np.abs(rebuilt - positions).max() < 1e-4


def test_motion_json_roundtrip(tmp_path, capsule_man):
    from sphereproxy.assets import random_motion

    skel = capsule_man.skeleton
    motion = random_motion(skel, 7, seed=3)
    path = tmp_path / "motion.json"
    motion.to_json(path)
    back = Motion.from_json(path)
    np.testing.assert_array_equal(back.quats, motion.quats)
    np.testing.assert_array_equal(back.root_t, motion.root_t)
    assert back.fps == motion.fps
