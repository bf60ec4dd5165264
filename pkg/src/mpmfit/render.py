"""Differentiable silhouette renderer and image losses.

Each particle becomes an isotropic Gaussian sprite of pixel radius
``focal * radius / depth``; per-pixel alpha is ``1 - prod(1 - opacity * g)``.
The product is accumulated as a sum of ``log1p`` terms over particles sorted by
a canonical key, so the image does not depend on the input order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from . import kernels as K
from .core import Camera, LossWeights, ParticleSet

log = logging.getLogger(__name__)

NEAR_PLANE = 1e-3
CUTOFF_SIGMAS = 3.0
ALPHA_MAX = 1.0 - 1e-9  # keeps log(1 - a) finite
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class RenderError(RuntimeError):
    """Every particle fell behind the near plane."""


@dataclass(frozen=True, eq=False)
class AlphaImage:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("alpha image must be 2-D")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("alpha values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _values(img) -> np.ndarray:
    return img.values if isinstance(img, AlphaImage) else np.asarray(img, dtype=float)


@dataclass
class RenderContext:
    """Everything the adjoint needs from a forward render."""

    order: np.ndarray
    pc: np.ndarray
    u: np.ndarray
    v: np.ndarray
    r: np.ndarray
    opac: np.ndarray
    T: np.ndarray
    camera: Camera
    skipped: int


def _canonical_order(positions, radii, opacities) -> np.ndarray:
    return np.lexsort((opacities, radii, positions[:, 2], positions[:, 1], positions[:, 0]))


def render_forward(positions, radii, opacities, camera: Camera):
    """Alpha map (H, W) and a :class:`RenderContext` for :func:`render_backward`."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    radii = np.asarray(radii, dtype=float)
    opacities = np.asarray(opacities, dtype=float)
    W, H = camera.width, camera.height
    if len(positions) == 0:
        return np.zeros((H, W)), None
    # depth test only; the projection itself is redone on sorted rows so it is order independent
    depth = positions @ camera.rotation[2] + camera.translation[2]
    front = depth > NEAR_PLANE
    skipped = int((~front).sum())
    if skipped == len(positions):
        raise RenderError("all particles are behind the camera")
    if skipped:
        log.debug("render: skipped %d particles behind the near plane", skipped)
    idx = np.flatnonzero(front)
    idx = idx[_canonical_order(positions[idx], radii[idx], opacities[idx])]
    pc = camera.to_camera(positions[idx])
    z = pc[:, 2]
    cx, cy = camera.principal_point
    f = camera.focal
    u = np.ascontiguousarray(f * pc[:, 0] / z + cx)
    v = np.ascontiguousarray(f * pc[:, 1] / z + cy)
    r = np.ascontiguousarray(f * radii[idx] / z)
    opac = np.ascontiguousarray(opacities[idx])
    logT = K.render_forward(u, v, r, opac, W, H, CUTOFF_SIGMAS, ALPHA_MAX)
    T = np.exp(logT)
    alpha = -np.expm1(logT)
    return alpha, RenderContext(idx, pc, u, v, r, opac, T, camera, skipped)


def render_backward(ctx: Optional[RenderContext], alpha_bar, n_particles: int):
    """Adjoints of the alpha map wrt world positions (N, 3), radii (N,) and opacities (N,)."""
    dpos = np.zeros((n_particles, 3))
    drad = np.zeros(n_particles)
    dopa = np.zeros(n_particles)
    if ctx is None:
        return dpos, drad, dopa
    cam = ctx.camera
    T_bar = -np.asarray(alpha_bar, dtype=float)
    ub, vb, rb, ob = K.render_backward(ctx.u, ctx.v, ctx.r, ctx.opac, cam.width, cam.height,
                                       CUTOFF_SIGMAS, ALPHA_MAX, ctx.T, np.ascontiguousarray(T_bar))
    f = cam.focal
    X, Y, Z = ctx.pc[:, 0], ctx.pc[:, 1], ctx.pc[:, 2]
    rho = ctx.r * Z / f
    pc_bar = np.stack([ub * f / Z, vb * f / Z, -(ub * f * X + vb * f * Y + rb * f * rho) / Z ** 2], axis=1)
    dpos[ctx.order] = pc_bar @ cam.rotation
    drad[ctx.order] = rb * f / Z
    dopa[ctx.order] = ob
    return dpos, drad, dopa


def render_alpha(particles, camera: Camera, radii=None, opacities=None) -> AlphaImage:
    """Silhouette of a :class:`ParticleSet` (or raw positions with ``radii``/``opacities``)."""
    if isinstance(particles, ParticleSet):
        pos, rad, opa = particles.positions, particles.radii, particles.opacities
    else:
        pos, rad, opa = particles, radii, opacities
    alpha, _ = render_forward(pos, rad, opa, camera)
    return AlphaImage(np.clip(alpha, 0.0, 1.0))


# -------------------------------------------------------------- losses

def _check_pair(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    return a, b


def loss_l1(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def loss_l1_grad(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    return np.sign(a - b) / a.size


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-x ** 2 / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


_WIN = _gauss_window()
_HALF = SSIM_WINDOW // 2


def _blur(img):
    """'valid' Gaussian filtering: output shrinks by the window size minus one."""
    out = correlate1d(img, _WIN, axis=0, mode="constant")
    out = correlate1d(out, _WIN, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _blur_adjoint(g, shape):
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = g
    # symmetric window, so the adjoint of correlation is the same correlation
    out = correlate1d(full, _WIN, axis=1, mode="constant")
    return correlate1d(out, _WIN, axis=0, mode="constant")


def _ssim_parts(a, b):
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    mua, mub = _blur(a), _blur(b)
    saa = _blur(a * a) - mua * mua
    sbb = _blur(b * b) - mub * mub
    sab = _blur(a * b) - mua * mub
    A1 = 2.0 * mua * mub + SSIM_C1
    A2 = 2.0 * sab + SSIM_C2
    B1 = mua * mua + mub * mub + SSIM_C1
    B2 = saa + sbb + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    return S, (mua, mub, A1, A2, B1, B2)


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    S, _ = _ssim_parts(a, b)
    return float(S.mean())


def loss_ssim(a, b) -> float:
    """``1 - SSIM`` with an 11x11 Gaussian window (sigma 1.5)."""
    return 1.0 - ssim(a, b)


def ssim_grad(a, b) -> np.ndarray:
    """d SSIM / d a."""
    a, b = _check_pair(a, b)
    S, (mua, mub, A1, A2, B1, B2) = _ssim_parts(a, b)
    scale = 1.0 / S.size
    dS_dmua = (2.0 * mub * A2 / (B1 * B2) - S * 2.0 * mua / B1) * scale
    dS_dsab = 2.0 * A1 / (B1 * B2) * scale
    dS_dsaa = -S / B2 * scale
    g_mu = dS_dmua - 2.0 * mua * dS_dsaa - mub * dS_dsab
    return (_blur_adjoint(g_mu, a.shape) + 2.0 * a * _blur_adjoint(dS_dsaa, a.shape)
            + b * _blur_adjoint(dS_dsab, a.shape))


def image_loss(a, b, weights: Optional[LossWeights] = None, lambda_l1: Optional[float] = None,
               lambda_ssim: Optional[float] = None) -> float:
    """``lambda_l1 * L1 + lambda_ssim * (1 - SSIM)``."""
    w = weights or LossWeights()
    l1w = w.lambda_l1 if lambda_l1 is None else lambda_l1
    ssw = w.lambda_ssim if lambda_ssim is None else lambda_ssim
    out = l1w * loss_l1(a, b)
    if ssw:
        out += ssw * loss_ssim(a, b)
    return float(out)


def image_loss_grad(a, b, weights: Optional[LossWeights] = None) -> tuple[float, np.ndarray]:
    """Value and gradient wrt ``a`` of :func:`image_loss`."""
    w = weights or LossWeights()
    a, b = _check_pair(a, b)
    val = w.lambda_l1 * loss_l1(a, b)
    grad = w.lambda_l1 * loss_l1_grad(a, b)
    if w.lambda_ssim:
        S, _ = _ssim_parts(a, b)
        val += w.lambda_ssim * (1.0 - float(S.mean()))
        grad = grad - w.lambda_ssim * ssim_grad(a, b)
    return float(val), grad


# -------------------------------------------------------------- export

def write_pgm(path, img, maxval: int = 255) -> None:
    """Plain (P2) PGM dump of an alpha map."""
    v = np.clip(_values(img), 0.0, 1.0)
    q = np.rint(v * maxval).astype(int)
    h, w = q.shape
    lines = [f"P2\n{w} {h}\n{maxval}"]
    lines += [" ".join(map(str, row)) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tok = Path(path).read_text().split()
    if tok[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, maxval = int(tok[1]), int(tok[2]), int(tok[3])
    return np.array(tok[4:4 + w * h], dtype=float).reshape(h, w) / maxval
