import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpmfit import kernels as K
from mpmfit.core import Camera, ring_cameras
from mpmfit.kernels import _pykernels
from mpmfit.render import (ALPHA_MAX, CUTOFF_SIGMAS, AlphaImage, RenderError, image_loss, image_loss_grad,
                           loss_l1, read_pgm, render_alpha, render_backward, render_forward, ssim, ssim_grad,
                           write_pgm)


def _small_camera(size=24):
    return ring_cameras(1, image_size=size)[0]


def _cloud(n, seed):
    rng = np.random.default_rng(seed)
    pos = 0.5 + 0.08 * rng.standard_normal((n, 3))
    rad = rng.uniform(0.01, 0.03, n)
    opa = rng.uniform(0.3, 0.95, n)
    return pos, rad, opa


def _alpha_oracle(pos, rad, opa, cam):
    """Per-pixel loop over every particle, written independently of the sprite kernel."""
    pc = pos @ cam.rotation.T + cam.translation
    cx, cy = cam.principal_point
    u = cam.focal * pc[:, 0] / pc[:, 2] + cx
    v = cam.focal * pc[:, 1] / pc[:, 2] + cy
    r = cam.focal * rad / pc[:, 2]
    tail = np.exp(-0.5 * CUTOFF_SIGMAS ** 2)
    out = np.zeros((cam.height, cam.width))
    for y in range(cam.height):
        for x in range(cam.width):
            T = 1.0
            for k in range(len(pos)):
                d2 = (x + 0.5 - u[k]) ** 2 + (y + 0.5 - v[k]) ** 2
                if d2 < (CUTOFF_SIGMAS * r[k]) ** 2:
                    g = (np.exp(-0.5 * d2 / r[k] ** 2) - tail) / (1 - tail)
                    T *= 1 - min(opa[k] * g, ALPHA_MAX)
            out[y, x] = 1 - T
    return out


def test_render_matches_pixel_loop():
    cam = _small_camera()
    pos, rad, opa = _cloud(12, 0)
    alpha, _ = render_forward(pos, rad, opa, cam)
    assert np.abs(alpha - _alpha_oracle(pos, rad, opa, cam)).max() < 1e-12
    assert alpha.max() > 0.3


def test_render_is_order_independent():
    cam = _small_camera(32)
    pos, rad, opa = _cloud(30, 1)
    p = np.random.default_rng(0).permutation(30)
    a, _ = render_forward(pos, rad, opa, cam)
    b, _ = render_forward(pos[p], rad[p], opa[p], cam)
    assert np.array_equal(a, b)


def test_backends_agree():
    cam = _small_camera(32)
    pos, rad, opa = _cloud(40, 2)
    _, ctx = render_forward(pos, rad, opa, cam)
    args = (ctx.u, ctx.v, ctx.r, ctx.opac, cam.width, cam.height, CUTOFF_SIGMAS, ALPHA_MAX)
    a = K.render_forward(*args)
    b = _pykernels.render_forward(*args)
    assert np.allclose(a, b, atol=1e-13)
    Tb = np.random.default_rng(1).standard_normal(a.shape)
    for x, y in zip(K.render_backward(*args, np.exp(a), Tb), _pykernels.render_backward(*args, np.exp(a), Tb)):
        assert np.allclose(x, y, atol=1e-12)


def test_render_gradients_match_fd():
    cam = _small_camera(32)
    pos, rad, opa = _cloud(20, 3)
    W = np.random.default_rng(4).standard_normal((32, 32))

    def f(p, r, o):
        return float(np.sum(W * render_forward(p, r, o, cam)[0]))

    _, ctx = render_forward(pos, rad, opa, cam)
    dp, dr, do = render_backward(ctx, W, len(pos))
    h = 1e-7
    worst = 0.0
    for i in range(len(pos)):
        for d in range(3):
            pp, pm = pos.copy(), pos.copy()
            pp[i, d] += h
            pm[i, d] -= h
            fd = (f(pp, rad, opa) - f(pm, rad, opa)) / (2 * h)
            worst = max(worst, abs(fd - dp[i, d]) / max(abs(fd), abs(dp[i, d]), 1e-6))
        rp, rm = rad.copy(), rad.copy()
        rp[i] += h
        rm[i] -= h
        fd = (f(pos, rp, opa) - f(pos, rm, opa)) / (2 * h)
        worst = max(worst, abs(fd - dr[i]) / max(abs(fd), abs(dr[i]), 1e-6))
        op, om = opa.copy(), opa.copy()
        op[i] += h
        om[i] -= h
        fd = (f(pos, rad, op) - f(pos, rad, om)) / (2 * h)
        worst = max(worst, abs(fd - do[i]) / max(abs(fd), abs(do[i]), 1e-6))
    assert worst <= 1e-3


def test_behind_camera():
    cam = _small_camera()
    behind = cam.center - 0.5 * cam.rotation[2]
    with pytest.raises(RenderError):
        render_forward(behind[None], np.array([0.02]), np.array([0.5]), cam)
    pos = np.vstack([behind, [0.5, 0.5, 0.5]])
    a, ctx = render_forward(pos, np.array([0.02, 0.02]), np.array([0.5, 0.5]), cam)
    assert ctx.skipped == 1 and a.max() > 0


def test_empty_set_renders_black():
    a, ctx = render_forward(np.zeros((0, 3)), np.zeros(0), np.zeros(0), _small_camera())
    assert ctx is None and not a.any()


def test_alpha_image_validation():
    with pytest.raises(ValueError):
        AlphaImage(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        AlphaImage(np.zeros(3))


def test_ssim_identical_is_one():
    img = np.random.default_rng(0).random((40, 40))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_ssim_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((24, 24)), rng.random((24, 24))
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_gradient_fd():
    rng = np.random.default_rng(5)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    g = ssim_grad(a, b)
    h = 1e-6
    for idx in [(0, 0), (10, 7), (19, 3)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        assert g[idx] == pytest.approx((ssim(ap, b) - ssim(am, b)) / (2 * h), rel=1e-5, abs=1e-10)


def test_image_loss_combination():
    rng = np.random.default_rng(6)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    val, grad = image_loss_grad(a, b)
    assert val == pytest.approx(0.8 * loss_l1(a, b) + 0.2 * (1 - ssim(a, b)))
    assert val == pytest.approx(image_loss(a, b))
    assert grad.shape == a.shape
    with pytest.raises(ValueError):
        loss_l1(a, b[:-1])


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_render_alpha_of_particle_set():
    from mpmfit.core import sample_shape
    ps = sample_shape("sphere", (0.5, 0.5, 0.5), 0.1, 1, 32)
    img = render_alpha(ps, ring_cameras(1, image_size=32)[0])
    assert isinstance(img, AlphaImage) and img.values.max() > 0.5
    # the sphere projects near the image centre
    ys, xs = np.nonzero(img.values > 0.5)
    assert abs(xs.mean() - 15.5) < 1.5 and abs(ys.mean() - 15.5) < 1.5
