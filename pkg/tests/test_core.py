import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpmfit.core import (NU_MAX, THETA_MAX, Camera, IncompressibilityError, LossWeights, MaterialParams,
                         ShapeError, lame_from_E_nu, lame_jacobian, params_to_raw, raw_jacobian, raw_to_params,
                         ring_cameras, sample_shape, shape_volume)


def test_lame_closed_forms():
    assert lame_from_E_nu(1.0, 0.0) == (0.5, 0.0)
    mu, lam = lame_from_E_nu(1.0, 0.25)
    assert mu == pytest.approx(0.4, abs=1e-15) and lam == pytest.approx(0.4, abs=1e-15)


def test_lame_reference_values():
    # independent evaluation of the two expressions
    E, nu = 1e5, 0.3
    mu_ref = E / 2.6
    lam_ref = E * 0.3 / (1.3 * 0.4)
    mu, lam = lame_from_E_nu(E, nu)
    assert mu == pytest.approx(mu_ref, rel=1e-14)
    assert lam == pytest.approx(lam_ref, rel=1e-14)
    assert round(mu, 2) == 38461.54 and round(lam, 2) == 57692.31


def test_lame_incompressible_rejected():
    with pytest.raises(IncompressibilityError):
        lame_from_E_nu(1.0, 0.5)


@given(st.floats(1e-3, 1e9), st.floats(1e-4, 0.4999))
def test_lame_positive(E, nu):
    mu, lam = lame_from_E_nu(E, nu)
    assert mu > 0 and lam > 0


def test_lame_jacobian_matches_fd():
    E, nu = 2e5, 0.27
    J = lame_jacobian(E, nu)
    for k, (dE, dn) in enumerate([(1.0, 0.0), (0.0, 1e-6)]):
        h = dE + dn
        p = np.array(lame_from_E_nu(E + dE, nu + dn))
        m = np.array(lame_from_E_nu(E - dE, nu - dn))
        assert np.allclose((p - m) / (2 * h), J[:, k], rtol=1e-7)


def test_raw_log_transform():
    tmpl = MaterialParams("elastic")
    assert raw_to_params([5.0, 0.0], tmpl).E == pytest.approx(1e5, rel=1e-15)


def test_raw_sigmoid_saturates_inside_bounds():
    tmpl = MaterialParams("elastic")
    assert raw_to_params([5.0, 1e6], tmpl).nu < NU_MAX
    assert raw_to_params([5.0, -1e6], tmpl).nu > 0
    sand = MaterialParams("sand")
    assert 0 < raw_to_params([1e6], sand).theta_fric < THETA_MAX


@pytest.mark.parametrize("mat", [
    MaterialParams("elastic", E=1.3e5, nu=0.31),
    MaterialParams("plasticine", E=2e5, nu=0.2, tau_y=3e3),
    MaterialParams("newtonian", mu_visc=12.0, kappa=2e5),
    MaterialParams("nonnewtonian", mu_visc=1e4, kappa=1e5, tau_y=1e3, eta=10.0),
    MaterialParams("sand", theta_fric=31.0),
])
def test_raw_round_trip(mat):
    back = raw_to_params(params_to_raw(mat), mat)
    for k in mat.active:
        assert getattr(back, k) == pytest.approx(getattr(mat, k), rel=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(-400, 400), min_size=4, max_size=4))
def test_every_raw_vector_is_valid(raw):
    p = raw_to_params(raw, MaterialParams("nonnewtonian"))
    assert p.mu_visc > 0 and p.kappa > 0 and p.tau_y >= 0 and p.eta > 0
    q = raw_to_params(raw[:2], MaterialParams("elastic"))
    assert 0 < q.nu < NU_MAX and q.E > 0


def test_raw_jacobian_fd():
    tmpl = MaterialParams("plasticine")
    raw = np.array([4.7, -0.3, 3.1])
    J = raw_jacobian(raw, tmpl)
    h = 1e-6
    for i, k in enumerate(tmpl.active):
        rp, rm = raw.copy(), raw.copy()
        rp[i] += h
        rm[i] -= h
        fd = (getattr(raw_to_params(rp, tmpl), k) - getattr(raw_to_params(rm, tmpl), k)) / (2 * h)
        assert fd == pytest.approx(J[i], rel=1e-6)


def test_raw_dimension_mismatch():
    with pytest.raises(ValueError):
        raw_to_params([1.0], MaterialParams("elastic"))


def test_material_range_checks():
    with pytest.raises(ValueError):
        MaterialParams("elastic", nu=0.47)
    with pytest.raises(ValueError):
        MaterialParams("sand", theta_fric=50.0)
    # inactive fields are not validated
    MaterialParams("newtonian", nu=0.49)


def test_cube_sampling_contained():
    ps = sample_shape("cube", (0.5, 0.5, 0.5), 0.2, 8, 32, seed=1)
    assert np.all(ps.positions >= 0.4) and np.all(ps.positions <= 0.6)
    assert np.allclose(ps.deformation_gradients, np.eye(3))
    assert np.all(ps.affine_velocities == 0)


def test_sphere_sampling_membership():
    c = np.array([0.5, 0.5, 0.5])
    ps = sample_shape("sphere", c, 0.1, 8, 32, seed=2)
    assert np.all(np.linalg.norm(ps.positions - c, axis=1) <= 0.1)


def test_torus_count_matches_volume_ratio():
    # Monte-Carlo estimate of the torus volume, independent of the closed form
    rng = np.random.default_rng(0)
    R, r = 0.15, 0.05
    pts = rng.uniform(-R - r, R + r, size=(400_000, 3))
    ring = np.hypot(pts[:, 0], pts[:, 2]) - R
    frac = np.mean(ring ** 2 + pts[:, 1] ** 2 <= r * r)
    vol_mc = frac * (2 * (R + r)) ** 3
    assert vol_mc == pytest.approx(shape_volume("torus", R, r / R), rel=0.02)
    cube = sample_shape("cube", (0.5, 0.5, 0.5), 0.3, 8, 32, seed=3)
    torus = sample_shape("torus", (0.5, 0.5, 0.5), R, 8, 32, seed=3, minor_ratio=r / R)
    expected = len(cube) * vol_mc / 0.3 ** 3
    assert abs(len(torus) - expected) <= 0.1 * expected


def test_sampling_deterministic():
    a = sample_shape("sphere", (0.5, 0.5, 0.5), 0.1, 8, 32, seed=5)
    b = sample_shape("sphere", (0.5, 0.5, 0.5), 0.1, 8, 32, seed=5)
    assert np.array_equal(a.positions, b.positions)


def test_mass_from_density():
    ps = sample_shape("cube", (0.5, 0.5, 0.5), 0.2, 8, 32, seed=0, density=1000.0)
    assert ps.masses.sum() == pytest.approx(1000.0 * 0.2 ** 3, rel=1e-12)


def test_shape_escape_rejected():
    with pytest.raises(ShapeError, match="escapes"):
        sample_shape("cube", (0.95, 0.5, 0.5), 0.2)


def test_particle_arrays_read_only():
    ps = sample_shape("cube", (0.5, 0.5, 0.5), 0.1, 1, 32)
    with pytest.raises(ValueError):
        ps.positions[0, 0] = 0.0


def test_camera_orthonormal():
    for cam in ring_cameras():
        R = cam.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    with pytest.raises(ValueError):
        Camera(np.diag([1.0, 1.0, 2.0]), np.zeros(3), 100.0, (64, 64), 128, 128)


def test_ring_cameras_look_at_target():
    for cam in ring_cameras(target=(0.5, 0.5, 0.5)):
        uv, z = cam.project(np.array([[0.5, 0.5, 0.5]]))
        assert np.allclose(uv, 64.0) and z[0] == pytest.approx(1.5)


def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.lambda_cd, w.lambda_l1, w.lambda_ssim, w.lambda_alpha) == (1.0, 0.8, 0.2, 1.0)
    assert w.img_weight(3) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        LossWeights(lambda_cd=-1.0)
