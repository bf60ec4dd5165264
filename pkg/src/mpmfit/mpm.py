"""MLS-MPM simulator with APIC transfers and a hand-written substep adjoint.

One substep is ``return map -> p2g -> grid update -> g2p -> advect``. The
forward pass can keep a per-substep cache so that :mod:`mpmfit.diffsim` can run
the matching backward pass.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels as K
from .core import Boundary, MaterialParams, ParticleSet, Scene, lame_from_E_nu
from .materials import constitutive_backward, constitutive_forward, stable_dt

log = logging.getLogger(__name__)

DIVERGENCE_SPEED = 100.0
_I3 = np.eye(3)


class DomainEscapeError(RuntimeError):
    def __init__(self, index: int, step: int, position):
        super().__init__(f"particle {index} left the simulation domain at substep {step} "
                         f"(position {np.round(position, 5).tolist()})")
        self.index = index
        self.step = step


class DivergenceError(RuntimeError):
    def __init__(self, step: int, speed: float):
        super().__init__(f"simulation diverged at substep {step}: max speed {speed:.3g} > {DIVERGENCE_SPEED}")
        self.step = step


class NumericFailureError(RuntimeError):
    def __init__(self, step: int, what: str = "gathered velocity"):
        super().__init__(f"non-finite {what} at substep {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class Grid:
    resolution: int
    node_masses: np.ndarray
    node_momenta: np.ndarray

    @property
    def spacing(self) -> float:
        return 1.0 / self.resolution

    @property
    def velocities(self) -> np.ndarray:
        m = self.node_masses[..., None]
        return np.divide(self.node_momenta, m, out=np.zeros_like(self.node_momenta), where=m > 0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    frames: list
    timestamps: np.ndarray
    substeps: tuple  # substeps in each interval between consecutive timestamps
    substep_dts: tuple

    def __post_init__(self):
        if len(self.frames) != len(self.timestamps):
            raise ValueError("one frame per timestamp required")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def substeps_per_frame(self) -> int:
        """Substeps per interval; the maximum when intervals differ."""
        return max(self.substeps) if self.substeps else 0

    @property
    def total_substeps(self) -> int:
        return int(sum(self.substeps))

    def positions(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames])


@dataclass
class State:
    """Mutable particle state advanced by the stepping loop."""

    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray

    def copy(self) -> "State":
        return State(self.x.copy(), self.v.copy(), self.F.copy(), self.C.copy())

    @classmethod
    def initial(cls, x0, v0) -> "State":
        x0 = np.array(x0, dtype=float)
        n = len(x0)
        return cls(x0, np.broadcast_to(np.asarray(v0, float), (n, 3)).copy(),
                   np.tile(_I3, (n, 1, 1)), np.zeros((n, 3, 3)))


@dataclass(frozen=True)
class StepConfig:
    """Everything a substep needs besides the particle state."""

    n: int
    masses: np.ndarray
    volumes: np.ndarray
    gravity: np.ndarray
    boundary: Boundary
    friction: float
    floor_cells: int
    side_walls: bool

    @classmethod
    def from_scene(cls, scene: Scene, particles: Optional[ParticleSet] = None) -> "StepConfig":
        p = scene.particles if particles is None else particles
        return cls(scene.grid_resolution, np.asarray(p.masses), np.asarray(p.volumes),
                   np.asarray(scene.gravity, float), scene.boundary, scene.ground_friction,
                   scene.floor_cells, scene.side_walls)

    @property
    def inv_dx(self) -> float:
        return float(self.n)


# ----------------------------------------------------------- grid update

def grid_velocity_update(gm, gmv, gravity, dt, cfg: StepConfig):
    """Node velocities after gravity and boundary conditions, plus the cache for the adjoint.

    Only nodes that received mass are touched; the rest stay zero.
    """
    n = cfg.n
    flat = np.flatnonzero(gm.ravel() > 0)
    ma = gm.ravel()[flat]
    v0 = gmv.reshape(-1, 3)[flat] / ma[:, None]
    v1 = v0 + dt * np.asarray(gravity, float)
    va = v1.copy()
    cache = {"idx": flat, "v0": v0, "floor": None, "sep": None, "walls": None}
    if cfg.boundary is not Boundary.NONE:
        i, j, k = np.unravel_index(flat, gm.shape)
        bound = cfg.floor_cells
        floor = j < bound
        if cfg.boundary is Boundary.STICKY:
            va[floor] = 0.0
        else:
            vf = v1[floor]
            vn = vf[:, 1]
            vt = vf * np.array([1.0, 0.0, 1.0])
            speed = np.linalg.norm(vt, axis=1)
            inward = vn < 0
            safe = np.where(speed > 0, speed, 1.0)
            s = np.maximum(np.where(speed > 0, 1.0 + cfg.friction * vn / safe, 0.0), 0.0)
            va[floor] = np.where(inward[:, None], vt * s[:, None], vf)
            cache["sep"] = (inward, vn, vt, speed, s)
        cache["floor"] = floor
        if cfg.side_walls:
            hi = n - bound
            walls = np.zeros(va.shape, bool)
            walls[:, 0] = ((i < bound) & (va[:, 0] < 0)) | ((i >= hi) & (va[:, 0] > 0))
            walls[:, 1] = (j >= hi) & (va[:, 1] > 0)
            walls[:, 2] = ((k < bound) & (va[:, 2] < 0)) | ((k >= hi) & (va[:, 2] > 0))
            va[walls] = 0.0
            cache["walls"] = walls
    v = np.zeros_like(gmv)
    v.reshape(-1, 3)[flat] = va
    return v, cache


def grid_velocity_vjp(v_bar, gm, cache, cfg: StepConfig):
    """Adjoint of :func:`grid_velocity_update` wrt node momenta and masses."""
    flat = cache["idx"]
    vb = v_bar.reshape(-1, 3)[flat].copy()
    if cfg.boundary is not Boundary.NONE:
        if cache["walls"] is not None:
            vb[cache["walls"]] = 0.0
        floor = cache["floor"]
        if cfg.boundary is Boundary.STICKY:
            vb[floor] = 0.0
        else:
            inward, vn, vt, speed, s = cache["sep"]
            ob = vb[floor]
            live = inward & (s > 0)
            dot = np.einsum("ij,ij->i", ob, vt)
            safe = np.where(speed > 0, speed, 1.0)
            tb = s[:, None] * ob * np.array([1.0, 0.0, 1.0]) - (cfg.friction * dot * vn / safe ** 3)[:, None] * vt
            ib = tb.copy()
            ib[:, 1] = dot * cfg.friction / safe
            vb[floor] = np.where(inward[:, None], np.where(live[:, None], ib, 0.0), ob)
    ma = gm.ravel()[flat]
    gb = vb / ma[:, None]
    gmv_bar = np.zeros(gm.shape + (3,))
    gm_bar = np.zeros(gm.shape)
    gmv_bar.reshape(-1, 3)[flat] = gb
    gm_bar.ravel()[flat] = -np.einsum("ij,ij->i", gb, cache["v0"])
    return gmv_bar, gm_bar


# -------------------------------------------------------------- substeps

def check_domain(x, n: int, step: int) -> None:
    X = x * n
    bad = ~np.all((X >= 0.5) & (X < n - 1.5), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DomainEscapeError(i, step, x[i])


def substep(state: State, material: MaterialParams, cfg: StepConfig, dt: float, step: int = 0,
            keep_cache: bool = False):
    """Advance one substep; returns ``(new_state, cache or None)``."""
    x, v, F, C = state.x, state.v, state.F, state.C
    check_domain(x, cfg.n, step)
    inv_dx = cfg.inv_dx
    Fp, tau, mcache = constitutive_forward(material, F, C)
    m = cfg.masses
    k = -dt * 4.0 * inv_dx * inv_dx
    A = k * cfg.volumes[:, None, None] * tau + m[:, None, None] * C
    mv = m[:, None] * v
    gm, gmv = K.p2g(x, mv, A, m, inv_dx, cfg.n)
    vg, gcache = grid_velocity_update(gm, gmv, cfg.gravity, dt, cfg)
    v_new, C_new = K.g2p(x, vg, inv_dx, cfg.n)
    if not np.all(np.isfinite(v_new)):
        raise NumericFailureError(step)
    x_new = x + dt * v_new
    F_new = np.einsum("nij,njk->nik", _I3 + dt * C_new, Fp)
    speed = float(np.sqrt(np.max(np.einsum("ij,ij->i", v_new, v_new)))) if len(v_new) else 0.0
    if speed > DIVERGENCE_SPEED:
        raise DivergenceError(step, speed)
    cache = None
    if keep_cache:
        cache = dict(x=x, mv=mv, A=A, Fp=Fp, mcache=mcache, gm=gm, gcache=gcache, vg=vg,
                     C_new=C_new, dt=dt, k=k)
    return State(x_new, v_new, F_new, C_new), cache


def substep_backward(cache, bar: State, material: MaterialParams, cfg: StepConfig):
    """Adjoint of one substep: end-of-step adjoints in, start-of-step adjoints and
    physical material gradients out."""
    dt = cache["dt"]
    inv_dx = cfg.inv_dx
    x = cache["x"]
    Fp = cache["Fp"]
    C_new = cache["C_new"]
    # x' = x + dt v',  F' = (I + dt C') Fp
    v_new_bar = bar.v + dt * bar.x
    C_new_bar = bar.C + dt * np.einsum("nij,nkj->nik", bar.F, Fp)
    Fp_bar = np.einsum("nji,njk->nik", _I3 + dt * C_new, bar.F)
    vg_bar, x_bar_g2p = K.g2p_backward(x, cache["vg"], v_new_bar, C_new_bar, inv_dx, cfg.n)
    gmv_bar, gm_bar = grid_velocity_vjp(vg_bar, cache["gm"], cache["gcache"], cfg)
    m = cfg.masses
    mv_bar, A_bar, x_bar_p2g = K.p2g_backward(x, cache["mv"], cache["A"], m, gmv_bar, gm_bar, inv_dx, cfg.n)
    tau_bar = cache["k"] * cfg.volumes[:, None, None] * A_bar
    F_bar, C_mat_bar, grads = constitutive_backward(material, cache["mcache"], Fp_bar, tau_bar)
    C_bar = m[:, None, None] * A_bar
    if C_mat_bar is not None:
        C_bar = C_bar + C_mat_bar
    out = State(bar.x + x_bar_g2p + x_bar_p2g, m[:, None] * mv_bar, F_bar, C_bar)
    return out, grads


# ------------------------------------------------------------ scheduling

def substep_plan(scene: Scene, material: MaterialParams, timestamps) -> tuple[tuple, tuple]:
    """Substep counts and sizes for each interval between timestamps."""
    ts = np.asarray(timestamps, dtype=float)
    dt_max = min(scene.dt, stable_dt(material, scene.dx, scene.density, scene.cfl, scene.velocity_allowance))
    counts, dts = [], []
    for gap in np.diff(ts):
        n = max(1, math.ceil(gap / dt_max * (1.0 - 1e-12)))
        if n > scene.max_substeps_per_frame:
            log.warning("interval %.4g s needs %d substeps; capped at %d", gap, n, scene.max_substeps_per_frame)
            n = scene.max_substeps_per_frame
        counts.append(n)
        dts.append(float(gap / n))
    return tuple(counts), tuple(dts)


def _snapshot(base: ParticleSet, st: State) -> ParticleSet:
    return base.replace(positions=st.x, velocities=st.v, deformation_gradients=st.F, affine_velocities=st.C)


def simulate(scene: Scene, material: Optional[MaterialParams] = None, v0=None, timestamps: Sequence[float] = (0.0,),
             *, particles: Optional[ParticleSet] = None, plan=None) -> Trajectory:
    """Forward simulation with snapshots at ``timestamps`` (seconds, first is t=0).

    ``plan`` fixes the substep schedule (as returned by :func:`substep_plan`);
    by default it follows from the CFL bound of ``material``.
    """
    material = scene.material if material is None else material
    v0 = scene.v0 if v0 is None else np.asarray(v0, float)
    base = scene.particles if particles is None else particles
    ts = np.asarray(timestamps, dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    counts, dts = substep_plan(scene, material, ts) if plan is None else plan
    cfg = StepConfig.from_scene(scene, base)
    st = State.initial(base.positions, v0)
    frames = [_snapshot(base, st)]
    step = 0
    for n_sub, dt in zip(counts, dts):
        for _ in range(n_sub):
            st, _ = substep(st, material, cfg, dt, step)
            step += 1
        frames.append(_snapshot(base, st))
    return Trajectory(frames, ts, tuple(counts), tuple(dts))


# ----------------------------------------------------- public single ops

def p2g(particles: ParticleSet, material: MaterialParams, grid, dt: float, step: int = 0) -> Grid:
    """Scatter mass and momentum (with the fused stress impulse) to a fresh grid.

    ``grid`` is a :class:`Grid` or an integer resolution.
    """
    n = grid.resolution if isinstance(grid, Grid) else int(grid)
    x = np.asarray(particles.positions)
    check_domain(x, n, step)
    _, tau, _ = constitutive_forward(material, particles.deformation_gradients, particles.affine_velocities)
    m = np.asarray(particles.masses)
    A = (-dt * 4.0 * n * n) * particles.volumes[:, None, None] * tau + m[:, None, None] * particles.affine_velocities
    gm, gmv = K.p2g(x, m[:, None] * particles.velocities, A, m, float(n), n)
    return Grid(n, gm, gmv)


def grid_update(grid: Grid, gravity, dt: float, boundary=Boundary.SEPARATING, friction: float = 0.5,
                floor_cells: int = 3, side_walls: bool = False) -> Grid:
    """Gravity plus floor (and optional wall) conditions; returns a grid holding updated momenta."""
    cfg = StepConfig(grid.resolution, np.zeros(0), np.zeros(0), np.asarray(gravity, float),
                     Boundary(boundary), friction, floor_cells, side_walls)
    v, _ = grid_velocity_update(grid.node_masses, grid.node_momenta, gravity, dt, cfg)
    return Grid(grid.resolution, grid.node_masses, v * grid.node_masses[..., None])


def g2p(grid: Grid, particles: ParticleSet, dt: float, step: int = 0) -> ParticleSet:
    """Gather velocity and affine matrix, advect, and update F = (I + dt C) F."""
    x = np.asarray(particles.positions)
    v, C = K.g2p(x, grid.velocities, float(grid.resolution), grid.resolution)
    if not np.all(np.isfinite(v)):
        raise NumericFailureError(step)
    F = np.einsum("nij,njk->nik", _I3 + dt * C, particles.deformation_gradients)
    return particles.replace(positions=x + dt * v, velocities=v, affine_velocities=C, deformation_gradients=F)


def step(scene: Scene, state: State, material: Optional[MaterialParams] = None, dt: Optional[float] = None,
         step_index: int = 0) -> State:
    """One full substep on a :class:`State`."""
    material = scene.material if material is None else material
    dt = scene.dt if dt is None else dt
    new, _ = substep(state, material, StepConfig.from_scene(scene), dt, step_index)
    return new


def total_energy(state: State, material: MaterialParams, cfg: StepConfig) -> float:
    """Kinetic + gravitational potential + neo-Hookean strain energy (elastic models)."""
    m = cfg.masses
    kin = 0.5 * float(np.sum(m * np.einsum("ij,ij->i", state.v, state.v)))
    pot = -float(np.sum(m * (state.x @ cfg.gravity)))
    mu, lam = lame_from_E_nu(material.E, material.nu)
    F = state.F
    J = np.linalg.det(F)
    logJ = np.log(J)
    psi = 0.5 * mu * (np.einsum("nij,nij->n", F, F) - 3.0) - mu * logJ + 0.5 * lam * logJ ** 2
    return kin + pot + float(np.sum(cfg.volumes * psi))
