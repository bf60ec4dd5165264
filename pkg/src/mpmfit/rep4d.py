"""Stage-0 reconstruction: particles plus a per-frame deformation field fitted to
multi-view silhouettes.

The deformation is a normalised Gaussian RBF over ``J`` control points placed
on the initial particles by farthest-point sampling::

    x_t = x_0 + sum_j w_j(x_0) d_{j,t},   w_j(x) = k_j(x) / sum_m k_m(x)

Particles are initialised from a voxel visual hull of the first frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import render
from .core import LossWeights, ParticleSet
from .optengine import AdamState, adam_step, _logit, _sigmoid

log = logging.getLogger(__name__)

FORMAT_TAG = "mpmfit-rep4d 1"


class ReconstructionError(RuntimeError):
    """The silhouettes do not intersect anywhere in the domain."""


@dataclass
class DeformationField:
    control_points: np.ndarray  # (J, 3)
    displacements: np.ndarray  # (T, J, 3); row 0 is zero
    rbf_sigma: float

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, float).reshape(-1, 3)
        self.displacements = np.asarray(self.displacements, float)
        J = len(self.control_points)
        if J < 1:
            raise ValueError("need at least one control point")
        if self.displacements.ndim != 3 or self.displacements.shape[1:] != (J, 3):
            raise ValueError(f"displacements must be (T, {J}, 3)")
        if not self.rbf_sigma > 0:
            raise ValueError("rbf_sigma must be positive")
        if len(self.displacements) and np.any(self.displacements[0] != 0):
            raise ValueError("displacement at frame 0 must be zero")

    @property
    def n_frames(self) -> int:
        return len(self.displacements)

    @classmethod
    def zeros(cls, control_points, n_frames: int, rbf_sigma: float) -> "DeformationField":
        cp = np.asarray(control_points, float).reshape(-1, 3)
        return cls(cp, np.zeros((n_frames, len(cp), 3)), rbf_sigma)


def rbf_weights(field: DeformationField, x) -> np.ndarray:
    """Normalised kernel weights (N, J), evaluated in log space."""
    x = np.asarray(x, float).reshape(-1, 3)
    d2 = np.sum((x[:, None, :] - field.control_points[None]) ** 2, axis=-1)
    logk = -d2 / (2.0 * field.rbf_sigma ** 2)
    w = np.exp(logk - logsumexp(logk, axis=1, keepdims=True))
    # exp underflows for every kernel: the ratio is ill-defined, use the nearest control point
    dead = np.max(logk, axis=1) < np.log(np.finfo(float).tiny)
    if np.any(dead):
        log.warning("rbf weights underflow for %d points; using nearest control point", int(dead.sum()))
        w[dead] = 0.0
        w[dead, np.argmin(d2[dead], axis=1)] = 1.0
    return w


def eval_deformation(field: DeformationField, x0, t: int) -> np.ndarray:
    x0 = np.asarray(x0, float).reshape(-1, 3)
    if not 0 <= t < field.n_frames:
        raise IndexError(f"frame {t} outside the fitted range 0..{field.n_frames - 1}")
    if t == 0:
        return x0.copy()
    return x0 + rbf_weights(field, x0) @ field.displacements[t]


def _deform_vjp(field: DeformationField, x0, w, t: int, gbar):
    """Adjoint of ``x_t`` wrt ``x0`` and ``d_t`` for upstream ``gbar`` (N, 3)."""
    D = field.displacements[t]
    dD = w.T @ gbar
    gw = gbar @ D.T  # (N, J)
    gl = w * (gw - np.sum(w * gw, axis=1, keepdims=True))
    diff = x0[:, None, :] - field.control_points[None]
    dx = gbar - np.einsum("nj,njk->nk", gl, diff) / field.rbf_sigma ** 2
    return dx, dD


def farthest_point_sampling(points, count: int, start: int = 0) -> np.ndarray:
    pts = np.asarray(points, float).reshape(-1, 3)
    count = min(count, len(pts))
    idx = np.empty(count, int)
    idx[0] = start
    d = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, count):
        idx[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((pts - pts[idx[i]]) ** 2, axis=1))
    return idx


def mean_spacing(points) -> float:
    """Mean nearest-neighbour distance."""
    pts = np.asarray(points, float)
    if len(pts) < 2:
        return 1.0
    d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.mean(np.sqrt(d2.min(axis=1))))


# ------------------------------------------------------------ visual hull

def visual_hull(alphas: Sequence, cameras: Sequence, resolution: int = 64, threshold: float = 0.5) -> np.ndarray:
    """Occupancy (R, R, R) of voxel centres whose projections are inside every silhouette.

    Voxels projecting outside an image or behind a camera are carved.
    """
    if len(alphas) != len(cameras) or not cameras:
        raise ValueError("need one alpha map per camera and at least one camera")
    c = (np.arange(resolution) + 0.5) / resolution
    centres = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
    occ = np.ones(len(centres), bool)
    for a, cam in zip(alphas, cameras):
        a = np.asarray(a, float)
        uv, z = cam.project(centres)
        uv = np.clip(np.where(np.isfinite(uv), uv, -1.0), -1.0, 1e9)
        px = np.floor(uv[:, 0]).astype(np.int64)
        py = np.floor(uv[:, 1]).astype(np.int64)
        ok = (z > render.NEAR_PLANE) & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        inside = np.zeros(len(centres), bool)
        inside[ok] = a[py[ok], px[ok]] >= threshold
        occ &= inside
    return occ.reshape(resolution, resolution, resolution)


def sample_hull(occ: np.ndarray, spacing: float, seed: int = 0) -> np.ndarray:
    """Jittered lattice samples (one per ``spacing``-sized cell) inside occupied voxels."""
    R = occ.shape[0]
    if not occ.any():
        raise ReconstructionError("visual hull is empty")
    ijk = np.argwhere(occ)
    lo = ijk.min(0) / R
    hi = (ijk.max(0) + 1) / R
    i0 = np.floor(lo / spacing).astype(int)
    i1 = np.ceil(hi / spacing).astype(int)
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(i0, i1)], indexing="ij"), -1).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    pts = (grid + rng.random(grid.shape)) * spacing
    vox = np.clip(np.floor(pts * R).astype(int), 0, R - 1)
    pts = pts[occ[vox[:, 0], vox[:, 1], vox[:, 2]]]
    if len(pts) == 0:
        raise ReconstructionError("visual hull is thinner than the sampling spacing")
    return pts


# ---------------------------------------------------------------- fitting

@dataclass
class Stage0Config:
    control_points: int = 64
    sigma_factor: float = 2.0  # RBF width in units of the mean control spacing
    hull_resolution: int = 64
    hull_threshold: float = 0.5
    spacing: float = 1.0 / 32.0  # particle lattice spacing inside the hull
    radius_factor: float = 0.75
    opacity: float = 0.9
    density: float = 1000.0
    lambda_temp: float = 0.1
    track_iterations: int = 100  # rest-shape fit, then per-frame warm start
    iterations: int = 60  # joint refinement over all frames
    lr_positions: float = 1e-4
    lr_displacements: float = 3e-3
    lr_appearance: float = 1e-2
    seed: int = 0


@dataclass
class Stage0Result:
    particles: ParticleSet
    field: DeformationField
    frame_losses: dict
    loss_trace: list = field(default_factory=list)
    hull_voxels: int = 0

    def targets(self, frames: Optional[Sequence[int]] = None) -> dict:
        fs = range(self.field.n_frames) if frames is None else frames
        return {int(t): eval_deformation(self.field, self.particles.positions, int(t)) for t in fs}


class _Stage0Objective:
    """Silhouette objective and gradient over positions, log radii, logit opacities
    and displacements."""

    def __init__(self, observations: dict, cameras, weights: LossWeights, lambda_temp: float):
        self.obs = observations
        self.cams = cameras
        self.w = weights
        n_cams = len({c for _, c in observations})
        self.img_w = weights.img_weight(max(n_cams, 1))
        self.lambda_temp = lambda_temp

    def __call__(self, x0, logr, logito, field: DeformationField, frames, need_grad=True):
        radii = np.exp(logr)
        opac = _sigmoid(logito)
        n = len(x0)
        gx = np.zeros_like(x0)
        gD = np.zeros_like(field.displacements)
        gr = np.zeros(n)
        go = np.zeros(n)
        total = 0.0
        per_frame = {}
        w = rbf_weights(field, x0)
        for t in frames:
            keys = sorted(k for k in self.obs if k[0] == t)
            if not keys:
                continue
            xt = x0 + w @ field.displacements[t] if t else x0
            gpos = np.zeros_like(x0)
            ft = 0.0
            for key in keys:
                alpha, ctx = render.render_forward(xt, radii, opac, self.cams[key[1]])
                target = self.obs[key]
                v, g = render.image_loss_grad(alpha, target, self.w)
                l1 = render.loss_l1(alpha, target)
                ft += self.img_w * v + self.w.lambda_alpha * l1
                if need_grad:
                    g = self.img_w * g + self.w.lambda_alpha * render.loss_l1_grad(alpha, target)
                    dp, dr, do = render.render_backward(ctx, g, n)
                    gpos += dp
                    gr += dr
                    go += do
            per_frame[t] = ft
            total += ft
            if need_grad:
                if t:
                    dx, dD = _deform_vjp(field, x0, w, t, gpos)
                    gx += dx
                    gD[t] += dD
                else:
                    gx += gpos
        if np.isfinite(self.lambda_temp) and self.lambda_temp > 0 and field.n_frames > 1:
            diff = np.diff(field.displacements, axis=0)
            total += self.lambda_temp * float(np.sum(diff * diff))
            if need_grad:
                gD[1:] += 2.0 * self.lambda_temp * diff
                gD[:-1] -= 2.0 * self.lambda_temp * diff
        gD[0] = 0.0
        grads = (gx, gr * radii, go * opac * (1.0 - opac), gD) if need_grad else None
        return total, per_frame, grads


def init_from_hull(observations: dict, cameras, config: Stage0Config, frame: int = 0):
    keys = sorted(k for k in observations if k[0] == frame)
    if not keys:
        raise ReconstructionError(f"no observations at frame {frame}")
    occ = visual_hull([observations[k] for k in keys], [cameras[k[1]] for k in keys],
                      config.hull_resolution, config.hull_threshold)
    if not occ.any():
        raise ReconstructionError("visual hull is empty; silhouettes do not intersect")
    pts = sample_hull(occ, config.spacing, config.seed)
    return pts, int(occ.sum())


def fit_stage0(observations: dict, cameras: Sequence, config: Optional[Stage0Config] = None,
               weights: Optional[LossWeights] = None) -> Stage0Result:
    """Fit particles and a deformation field to ``observations[(t, c)]`` alpha maps."""
    cfg = config or Stage0Config()
    weights = weights or LossWeights()
    frames = sorted({t for t, _ in observations})
    if not cameras or not observations:
        raise ValueError("need at least one camera and one observation")
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if frames != list(range(len(frames))):
        raise ValueError("observed frames must be 0..T-1")
    x0, nvox = init_from_hull(observations, cameras, cfg)
    n = len(x0)
    log.info("stage 0: %d hull voxels, %d particles", nvox, n)
    cp = x0[farthest_point_sampling(x0, cfg.control_points)]
    sigma = cfg.sigma_factor * mean_spacing(cp) if len(cp) > 1 else 1.0
    field_ = DeformationField.zeros(cp, len(frames), sigma)
    logr = np.full(n, np.log(cfg.radius_factor * cfg.spacing))
    logito = np.full(n, float(_logit(cfg.opacity)))
    obj = _Stage0Objective(observations, cameras, weights, cfg.lambda_temp)
    static = not np.isfinite(cfg.lambda_temp)

    # fit the rest shape to frame 0 first, through the same control-point field the
    # later frames use; otherwise their displacements absorb the hull's misfit and a
    # static scene appears to deform
    rest_obs = {(1, c): a for (t, c), a in observations.items() if t == 0}
    rest = _Stage0Objective(rest_obs, cameras, weights, 0.0)
    rest_field = DeformationField.zeros(cp, 2, sigma)
    shape = [x0, logr, logito, rest_field.displacements[1]]
    shape_states = [AdamState.zeros_like(a) for a in shape]
    shape_lrs = (cfg.lr_positions, cfg.lr_appearance, cfg.lr_appearance, cfg.lr_displacements)
    best0 = None
    for it in range(cfg.track_iterations + 1):
        rest_field.displacements[1] = shape[3]
        v, _, g = rest(*shape[:3], rest_field, [1], need_grad=it < cfg.track_iterations)
        if best0 is None or v < best0[0]:
            best0 = (v, [a.copy() for a in shape])
        if it == cfg.track_iterations:
            break
        for i in range(4):
            shape[i], shape_states[i] = adam_step(shape[i], shape_states[i], g[i] if i < 3 else g[3][1],
                                                  shape_lrs[i])
    x0, logr, logito, d_rest = best0[1]
    x0 = x0 + rbf_weights(rest_field, x0) @ d_rest

    # per-frame warm start: d_t starts from d_{t-1} and is fitted on frame t alone
    D = field_.displacements
    if not static:
        track = _Stage0Objective(observations, cameras, weights, 0.0)
        for t in frames[1:]:
            D[t] = D[t - 1]
            st = AdamState.zeros_like(D[t])
            best_v, best_d = np.inf, D[t].copy()
            for it in range(cfg.track_iterations):
                v, _, g = track(x0, logr, logito, field_, [t])
                reg = cfg.lambda_temp * float(np.sum((D[t] - D[t - 1]) ** 2))
                if v + reg < best_v:
                    best_v, best_d = v + reg, D[t].copy()
                gd = g[3][t] + 2.0 * cfg.lambda_temp * (D[t] - D[t - 1])
                D[t], st = adam_step(D[t], st, gd, cfg.lr_displacements)
            v, _, _ = track(x0, logr, logito, field_, [t], need_grad=False)
            if v + cfg.lambda_temp * float(np.sum((D[t] - D[t - 1]) ** 2)) > best_v:
                D[t] = best_d

    # joint refinement with a best-so-far snapshot
    states = [AdamState.zeros_like(a) for a in (x0, logr, logito, D)]
    lrs = (cfg.lr_positions, cfg.lr_appearance, cfg.lr_appearance, cfg.lr_displacements)
    params = [x0.copy(), logr.copy(), logito.copy(), D.copy()]
    best = None
    trace = []
    for it in range(cfg.iterations + 1):
        field_.displacements = params[3]
        total, per_frame, g = obj(params[0], params[1], params[2], field_, frames,
                                  need_grad=it < cfg.iterations)
        trace.append(total)
        if best is None or total < best[0]:
            best = (total, [p.copy() for p in params], dict(per_frame))
        if it == cfg.iterations:
            break
        for i in range(4):
            if i == 3 and static:
                continue
            params[i], states[i] = adam_step(params[i], states[i], g[i], lrs[i])
        params[3][0] = 0.0
    _, (x0, logr, logito, D), per_frame = best
    field_ = DeformationField(cp, D, sigma)
    vol = cfg.spacing ** 3
    particles = ParticleSet.at_rest(
        positions=x0, masses=np.full(n, cfg.density * vol), volumes=np.full(n, vol),
        radii=np.exp(logr), opacities=np.clip(_sigmoid(logito), 0.0, 1.0))
    return Stage0Result(particles, field_, per_frame, trace, nvox)


# ---------------------------------------------------------- serialisation

def _fmt(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def save(path, result: Stage0Result) -> None:
    """Single text file: header, control points, displacement table, particle dump."""
    f, p = result.field, result.particles
    J, T, N = len(f.control_points), f.n_frames, len(p)
    lines = [FORMAT_TAG, f"control_points {J}", f"frames {T}", f"particles {N}",
             f"rbf_sigma {f.rbf_sigma!r}", "# control points: x y z"]
    lines += [_fmt(c) for c in f.control_points]
    lines.append("# displacements: t j dx dy dz")
    lines += [f"{t} {j} {_fmt(f.displacements[t, j])}" for t in range(T) for j in range(J)]
    lines.append("# particles: x y z radius opacity mass volume")
    lines += [_fmt([*p.positions[i], p.radii[i], p.opacities[i], p.masses[i], p.volumes[i]]) for i in range(N)]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> Stage0Result:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if rows[0] != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} file")
    J, T, N = (int(rows[i].split()[1]) for i in (1, 2, 3))
    sigma = float(rows[4].split()[1])
    body = rows[5:]
    cp = np.array([[float(v) for v in r.split()] for r in body[:J]])
    D = np.zeros((T, J, 3))
    for r in body[J:J + T * J]:
        t, j, *d = r.split()
        D[int(t), int(j)] = [float(v) for v in d]
    P = np.array([[float(v) for v in r.split()] for r in body[J + T * J:J + T * J + N]]).reshape(N, 7)
    particles = ParticleSet.at_rest(P[:, :3], P[:, 5], P[:, 6], P[:, 3], P[:, 4])
    return Stage0Result(particles, DeformationField(cp, D, sigma), {})
