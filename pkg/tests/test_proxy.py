import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphereproxy.errors import ConfigError
from sphereproxy.proxy import (
    FitConfig,
    SphereSet,
    fit_sphere_proxy,
    init_spheres,
    intersection_distance,
    loss_emptiness,
    loss_is,
    loss_sdf,
    sphere_set_sdf,
)
from sphereproxy.sdf import SamplePlan, SdfSampleSet, sample_sdf_set

from conftest import cube_mesh


def random_spheres(rng, s=6, spread=1.0):
    return SphereSet(
        rng.uniform(-spread, spread, size=(s, 3)),
        rng.uniform(0.2, 0.8, size=s),
    )


def random_batch(rng, k=40, spread=1.5):
    pts = rng.uniform(-spread, spread, size=(k, 3))
    dx = rng.uniform(-0.5, 0.5, size=k)
    return SdfSampleSet(pts, dx, np.zeros(k, dtype=np.uint8))


def away_from_kinks(spheres, batch, margin=1e-3):
    """True when no max/abs/min boundary is within the FD step's reach."""
    d = np.linalg.norm(
        batch.points[:, None, :] - spheres.centers[None, :, :], axis=2
    )
    per = d - spheres.radii[None, :]
    srt = np.sort(per, axis=1)
    if np.any(srt[:, 1] - srt[:, 0] < margin):  # near min tie
        return False
    ds = srt[:, 0]
    if np.any(np.abs(ds) < margin):  # truncation kink
        return False
    if np.any(np.abs(ds - batch.distances) < margin):  # abs kink
        return False
    if np.any(np.abs(batch.distances) < margin):  # inside/outside switch
        return False
    # emptiness argmin ties
    srt_k = np.sort(d, axis=0)
    if np.any(srt_k[1] - srt_k[0] < margin):
        return False
    # emptiness max kink
    kappa = np.argmin(d, axis=0)
    u = d[kappa, np.arange(spheres.count)] - spheres.radii
    if np.any(np.abs(u) < margin):
        return False
    # pairwise intersection kinks
    iu, ju = np.triu_indices(spheres.count, k=1)
    gap = np.linalg.norm(spheres.centers[iu] - spheres.centers[ju], axis=1)
    b = spheres.radii[iu] + spheres.radii[ju] - gap
    if np.any(np.abs(b) < margin) or np.any(gap < margin):
        return False
    return True


def fd_gradient(fn, spheres, h=1e-5):
    """Central finite differences of fn(SphereSet) -> value."""
    gc = np.zeros_like(spheres.centers)
    gr = np.zeros_like(spheres.radii)
    for i in range(spheres.count):
        for a in range(3):
            for sign in (+1, -1):
                c = spheres.centers.copy()
                c[i, a] += sign * h
                gc[i, a] += sign * fn(SphereSet(c, spheres.radii))
        r = spheres.radii.copy()
        r[i] += h
        up = fn(SphereSet(spheres.centers, r))
        r[i] -= 2 * h
        dn = fn(SphereSet(spheres.centers, r))
        gr[i] = (up - dn) / (2 * h)
    gc /= 2 * h
    return gc, gr


def check_gradients(loss, spheres, rel_tol=1e-4, **kwargs):
    value, gc, gr = loss(spheres, **kwargs) if kwargs else loss(spheres)
    fn = (lambda s: loss(s, **kwargs)[0]) if kwargs else (lambda s: loss(s)[0])
    fgc, fgr = fd_gradient(fn, spheres)
    scale = max(
        np.abs(fgc).max(), np.abs(fgr).max(), np.abs(gc).max(), np.abs(gr).max(), 1e-12
    )
    assert np.abs(gc - fgc).max() / scale < rel_tol
    assert np.abs(gr - fgr).max() / scale < rel_tol


# -- sphere set SDF -----------------------------------------------------------


def test_sdf_single_sphere():
    s = SphereSet(np.zeros((1, 3)), np.array([1.0]))
    assert sphere_set_sdf(s, np.zeros(3)) == pytest.approx(-1.0)
    assert sphere_set_sdf(s, np.array([2.0, 0, 0])) == pytest.approx(1.0)


def test_sdf_matches_per_sphere_loop():
    rng = np.random.default_rng(0)
    s = random_spheres(rng, s=192, spread=1.0)
    pts = rng.uniform(-2, 2, size=(500, 3))
    fast = sphere_set_sdf(s, pts)
    slow = np.empty(500)
    for i, p in enumerate(pts):
        slow[i] = min(
            float(np.sqrt(((p - c) ** 2).sum())) - r
            for c, r in zip(s.centers, s.radii)
        )
    np.testing.assert_array_equal(fast, slow)


# -- individual losses --------------------------------------------------------


def test_loss_sdf_zero_on_surface():
    s = SphereSet(np.zeros((1, 3)), np.array([1.0]))
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]])
    batch = SdfSampleSet(pts, np.zeros(3), np.zeros(3, dtype=np.uint8))
    value, gc, gr = loss_sdf(s, batch)
    assert value == 0.0


def test_loss_sdf_truncated_inside():
    # inside sample (d_X < 0) already covered by the sphere: no penalty
    s = SphereSet(np.zeros((1, 3)), np.array([1.0]))
    batch = SdfSampleSet(
        np.array([[0.2, 0, 0]]), np.array([-0.5]), np.zeros(1, dtype=np.uint8)
    )
    value, gc, gr = loss_sdf(s, batch)
    assert value == 0.0
    np.testing.assert_array_equal(gc, 0.0)
    np.testing.assert_array_equal(gr, 0.0)


def test_loss_emptiness_formula():
    # sphere r=1 at origin, nearest inside sample at distance 3: (3-1)/S
    s = SphereSet(np.zeros((1, 3)), np.array([1.0]))
    batch = SdfSampleSet(
        np.array([[3.0, 0, 0]]), np.array([-0.1]), np.zeros(1, dtype=np.uint8)
    )
    value, _, _ = loss_emptiness(s, batch)
    assert value == pytest.approx(2.0)


def test_loss_emptiness_zero_when_contained():
    s = SphereSet(np.zeros((1, 3)), np.array([1.0]))
    batch = SdfSampleSet(
        np.array([[0.5, 0, 0]]), np.array([-0.2]), np.zeros(1, dtype=np.uint8)
    )
    value, gc, gr = loss_emptiness(s, batch)
    assert value == 0.0
    np.testing.assert_array_equal(gc, 0.0)


def test_intersection_distance_cases():
    assert intersection_distance(((0, 0, 0), 1.0), ((1, 0, 0), 1.0)) == 1.0
    assert intersection_distance(((0, 0, 0), 1.0), ((3, 0, 0), 1.0)) == 0.0
    assert intersection_distance(((0, 0, 0), 1.0), ((0, 0, 0), 1.0)) == 2.0


def test_loss_is_values():
    far = SphereSet(
        np.array([[0.0, 0, 0], [5.0, 0, 0], [0, 5.0, 0]]),
        np.array([1.0, 1.0, 1.0]),
    )
    assert loss_is(far)[0] == 0.0
    two = SphereSet(
        np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([1.0, 1.0])
    )
    assert loss_is(two)[0] == pytest.approx(1.0 / 4.0)  # b = 1, S^2 = 4
    with pytest.raises(ConfigError):
        loss_is(SphereSet(np.zeros((1, 3)), np.array([1.0])))


@given(
    ra=st.floats(0.05, 2.0),
    rb=st.floats(0.05, 2.0),
    gap=st.floats(0.0, 5.0),
)
@settings(max_examples=60, deadline=None)
def test_intersection_distance_properties(ra, rb, gap):
    b = intersection_distance(((0, 0, 0), ra), ((gap, 0, 0), rb))
    assert b >= 0.0
    assert b == pytest.approx(max(ra + rb - gap, 0.0), rel=1e-12)


# -- gradient checks against central finite differences ----------------------


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    checked = {"sdf": 0, "empty": 0, "is": 0}
    attempts = 0
    while min(checked.values()) < 20 and attempts < 400:
        attempts += 1
        spheres = random_spheres(rng)
        batch = random_batch(rng)
        if not away_from_kinks(spheres, batch):
            continue
        check_gradients(loss_sdf, spheres, batch=batch)
        checked["sdf"] += 1
        check_gradients(loss_emptiness, spheres, batch=batch)
        checked["empty"] += 1
        check_gradients(loss_is, spheres)
        checked["is"] += 1
    assert min(checked.values()) >= 20, f"only reached {checked}"


# -- fitting ------------------------------------------------------------------


def make_samples(mesh, seed=0, n_ambient=1500, n_surface=4000):
    return sample_sdf_set(
        mesh, SamplePlan(n_ambient=n_ambient, n_surface=n_surface), seed=seed
    )


def test_init_spheres_inside(icosphere):
    samples = make_samples(icosphere, seed=1)
    start = init_spheres(samples, 16, 1.0, seed=2)
    assert start.count == 16
    # seeded at inside-tagged samples
    assert (np.linalg.norm(start.centers, axis=1) < 1.0 + 1e-9).all()


def test_fit_single_sphere_on_icosphere(icosphere):
    samples = make_samples(icosphere, seed=3)
    cfg = FitConfig(
        sphere_count=1,
        epochs=800,
        batch_size=1024,
        lr=5e-3,
        lr_decay=0.5,
        lr_decay_every=300,
        batch_fractions=(0.2, 0.8, 0.0),
        seed=0,
    )
    fitted, report = fit_sphere_proxy(icosphere, samples, cfg)
    assert np.linalg.norm(fitted.centers[0]) < 0.02
    assert fitted.radii[0] == pytest.approx(1.0, abs=0.02)
    # loss decomposition holds for every epoch
    recon = (
        report.l_sdf
        + cfg.lambda_emptiness * report.l_emptiness
        + cfg.lambda_is * report.l_is
    )
    assert np.abs(recon - report.l_sp).max() <= 1e-9


def test_fit_capsule_eight_spheres():
    from sphereproxy.assets import gen_capsule

    capsule = gen_capsule(radius=0.1, length=0.6)
    samples = make_samples(capsule, seed=4)
    cfg = FitConfig(
        sphere_count=8,
        epochs=1200,
        batch_size=2048,
        lr=2e-3,
        lr_decay=0.5,
        lr_decay_every=400,
        batch_fractions=(0.1, 0.9, 0.0),
        seed=1,
    )
    fitted, report = fit_sphere_proxy(capsule, samples, cfg)
    per_vertex = np.abs(sphere_set_sdf(fitted, capsule.vertices)).mean()
    assert per_vertex < 0.03 * 0.1  # 3 % of the capsule radius
    # loss trend: the tail is better than the head
    assert report.l_sp[-100:].mean() < report.l_sp[:100].mean()


def test_fit_reproducible(icosphere):
    samples = make_samples(icosphere, seed=5, n_ambient=400, n_surface=900)
    cfg = FitConfig(
        sphere_count=4,
        epochs=40,
        batch_size=256,
        lr=1e-3,
        batch_fractions=(0.2, 0.8, 0.0),
        seed=9,
    )
    f1, r1 = fit_sphere_proxy(icosphere, samples, cfg)
    f2, r2 = fit_sphere_proxy(icosphere, samples, cfg)
    np.testing.assert_array_equal(f1.centers, f2.centers)
    np.testing.assert_array_equal(f1.radii, f2.radii)
    np.testing.assert_array_equal(r1.l_sp, r2.l_sp)


def test_scale_homogeneity_of_plain_gd():
    """All three losses are degree-1 in lengths, so plain gradient descent
    with the rate scaled by s follows the s-scaled trajectory."""
    rng = np.random.default_rng(12)
    spheres = random_spheres(rng, s=5)
    batch = random_batch(rng, k=30)
    s = 2.0
    lam_e, lam_is = 10.0, 0.1
    lr = 1e-3

    def total(sph, bat):
        v1, gc1, gr1 = loss_sdf(sph, bat)
        v2, gc2, gr2 = loss_emptiness(sph, bat)
        v3, gc3, gr3 = loss_is(sph)
        return (
            v1 + lam_e * v2 + lam_is * v3,
            gc1 + lam_e * gc2 + lam_is * gc3,
            gr1 + lam_e * gr2 + lam_is * gr3,
        )

    def run(scale, steps=3):
        c = spheres.centers * scale
        r = spheres.radii * scale
        bat = SdfSampleSet(
            batch.points * scale, batch.distances * scale, batch.tags
        )
        traj = []
        for _ in range(steps):
            _, gc, gr = total(SphereSet(c, r), bat)
            c = c - (lr * scale) * gc
            r = r - (lr * scale) * gr
            traj.append((c.copy(), r.copy()))
        return traj

    base = run(1.0)
    scaled = run(s)
    for (c1, r1), (c2, r2) in zip(base, scaled):
        np.testing.assert_allclose(c2, c1 * s, rtol=1e-6)
        np.testing.assert_allclose(r2, r1 * s, rtol=1e-6)


def test_sphere_set_json_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    s = random_spheres(rng)
    path = tmp_path / "spheres.json"
    s.to_json(path)
    back = SphereSet.from_json(path)
    np.testing.assert_array_equal(back.centers, s.centers)
    np.testing.assert_array_equal(back.radii, s.radii)


def test_fit_config_validation():
    with pytest.raises(ConfigError):
        FitConfig(sphere_count=0).validate()
    with pytest.raises(ConfigError):
        FitConfig(lambda_emptiness=-1).validate()
    with pytest.raises(ConfigError):
        FitConfig(batch_fractions=(0.5, 0.2, 0.2)).validate()
