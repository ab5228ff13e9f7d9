import numpy as np
import pytest

from sphereproxy.assets import (
    contact_motion,
    gen_capsule,
    gen_icosphere,
    gen_two_cubes,
    random_motion,
)
from sphereproxy.mesh import check_watertight, mesh_volume
from sphereproxy.skinning import pose_joints


def test_icosphere_volume_within_one_percent():
    mesh = gen_icosphere(radius=1.0, subdivisions=4)
    vol = mesh_volume(mesh)
    analytic = 4.0 / 3.0 * np.pi
    assert vol < analytic
    assert abs(vol - analytic) / analytic < 0.01


def test_capsule_watertight_and_volume():
    mesh = gen_capsule(radius=0.1, length=0.6)
    assert check_watertight(mesh)[0]
    analytic = np.pi * 0.1**2 * 0.6 + 4.0 / 3.0 * np.pi * 0.1**3
    assert mesh_volume(mesh) == pytest.approx(analytic, rel=0.03)


def test_two_cubes_meta():
    mesh = gen_two_cubes(overlap=0.2)
    assert check_watertight(mesh)[0]
    assert mesh.meta["overlap_volume"] == pytest.approx(0.008)
    # divergence-theorem volume counts both closed boxes
    assert mesh_volume(mesh) == pytest.approx(2.0, abs=1e-12)


def test_capsule_man_asset(capsule_man):
    mesh, skel = capsule_man.mesh, capsule_man.skeleton
    assert skel.n_joints == 22
    assert check_watertight(mesh)[0]
    assert mesh.blend_weights is not None
    assert np.abs(mesh.blend_weights.sum(axis=1) - 1.0).max() < 1e-6
    assert (mesh.blend_weights >= 0.0).all()
    assert len(mesh.detail_vertices) > 0
    assert mesh.meta["torso_radius"] > 0


def test_random_motion_deterministic(capsule_man):
    skel = capsule_man.skeleton
    m1 = random_motion(skel, 5, seed=4)
    m2 = random_motion(skel, 5, seed=4)
    np.testing.assert_array_equal(m1.quats, m2.quats)
    assert np.abs(np.linalg.norm(m1.quats, axis=2) - 1.0).max() < 1e-9


def test_contact_motion_roughly_static(capsule_man):
    skel = capsule_man.skeleton
    motion = contact_motion(skel, 8, seed=0)
    # arms stay down near the body in every frame
    for i in range(len(motion)):
        _, pos = pose_joints(skel, motion.pose(i))
        wrist_l, wrist_r = pos[20], pos[21]
        assert wrist_l[1] < 1.1  # well below the T-pose height of 1.42
        assert wrist_r[1] < 1.1
