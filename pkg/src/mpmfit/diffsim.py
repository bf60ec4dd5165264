"""Reverse-mode gradients through :func:`mpmfit.mpm.simulate` with checkpointing,
plus a central-difference oracle.

Losses are built from a closed set of primitives (:class:`PositionMSE`,
:class:`ChamferTerm`, :class:`ImageTerm`, :class:`WeightedSum`); anything else
is rejected because its adjoint is unknown.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import geomloss, render
from .core import LossWeights, MaterialParams, Scene, params_to_raw, raw_jacobian, raw_to_params
from .materials import branch_id, branch_margin
from .mpm import NumericFailureError, State, StepConfig, Trajectory, substep, substep_backward, substep_plan
from .geomloss import ContractError

log = logging.getLogger(__name__)

PARAM_GROUPS = ("v0", "material", "x0", "appearance")
DEFAULT_STATE_BUDGET = 64


class InfeasibleBudgetError(ValueError):
    pass


# ---------------------------------------------------------------- losses

@dataclass
class TermValue:
    value: float
    dpos: Optional[np.ndarray] = None
    drad: Optional[np.ndarray] = None
    dopa: Optional[np.ndarray] = None
    parts: dict = field(default_factory=dict)


class LossTerm:
    """Base class of the registered differentiable loss primitives."""

    name = "loss"

    def frames(self) -> set:
        raise NotImplementedError

    def evaluate(self, frame: int, positions, radii, opacities, need_grad: bool) -> TermValue:
        raise NotImplementedError

    def restrict(self, frames: Iterable[int]) -> "LossTerm":
        raise NotImplementedError


def _add(a, b):
    if b is None:
        return a
    return b.copy() if a is None else a + b


class PositionMSE(LossTerm):
    """``weight * sum ||x_t - target_t||^2`` over the given frames."""

    name = "L_pos"

    def __init__(self, targets: dict, weight: float = 1.0):
        self.targets = {int(k): np.asarray(v, float) for k, v in targets.items()}
        self.weight = float(weight)

    def frames(self):
        return set(self.targets)

    def restrict(self, frames):
        fs = set(frames)
        return PositionMSE({k: v for k, v in self.targets.items() if k in fs}, self.weight)

    def evaluate(self, frame, positions, radii, opacities, need_grad):
        if frame not in self.targets:
            return TermValue(0.0)
        d = positions - self.targets[frame]
        val = self.weight * float(np.sum(d * d))
        return TermValue(val, 2.0 * self.weight * d if need_grad else None, parts={self.name: val})


class ChamferTerm(LossTerm):
    """``weight * sum_t chamfer(x_t, target_t)``."""

    name = "L_CD"

    def __init__(self, targets: dict, weight: float = 1.0):
        self.targets = {int(k): np.asarray(v, float) for k, v in targets.items()}
        self.weight = float(weight)

    def frames(self):
        return set(self.targets)

    def restrict(self, frames):
        fs = set(frames)
        return ChamferTerm({k: v for k, v in self.targets.items() if k in fs}, self.weight)

    def evaluate(self, frame, positions, radii, opacities, need_grad):
        if frame not in self.targets:
            return TermValue(0.0)
        val, g = geomloss.chamfer_grad(positions, self.targets[frame])
        val *= self.weight
        return TermValue(val, self.weight * g if need_grad else None, parts={self.name: val})


class ImageTerm(LossTerm):
    """``weight * sum_{t,c} image_loss(render(x_t, c), alpha_{t,c})``.

    ``observations`` maps ``(frame, camera_index)`` to an alpha map; ``weight``
    defaults to ``1 / |C|`` via :class:`LossWeights`.
    """

    name = "L_img"

    def __init__(self, observations: dict, cameras: Sequence, weights: Optional[LossWeights] = None,
                 weight: Optional[float] = None):
        self.observations = {(int(t), int(c)): np.asarray(a, float) for (t, c), a in observations.items()}
        self.cameras = list(cameras)
        self.loss_weights = weights or LossWeights()
        cams_used = {c for _, c in self.observations}
        self.weight = self.loss_weights.img_weight(max(len(cams_used), 1)) if weight is None else float(weight)

    def frames(self):
        return {t for t, _ in self.observations}

    def restrict(self, frames):
        fs = set(frames)
        return ImageTerm({k: v for k, v in self.observations.items() if k[0] in fs}, self.cameras,
                         self.loss_weights, self.weight)

    def evaluate(self, frame, positions, radii, opacities, need_grad):
        keys = sorted(k for k in self.observations if k[0] == frame)
        val = 0.0
        n = len(positions)
        dpos = np.zeros((n, 3)) if need_grad else None
        drad = np.zeros(n) if need_grad else None
        dopa = np.zeros(n) if need_grad else None
        for key in keys:
            cam = self.cameras[key[1]]
            alpha, ctx = render.render_forward(positions, radii, opacities, cam)
            v, g = render.image_loss_grad(alpha, self.observations[key], self.loss_weights)
            val += self.weight * v
            if need_grad:
                dp, dr, do = render.render_backward(ctx, self.weight * g, n)
                dpos += dp
                drad += dr
                dopa += do
        return TermValue(val, dpos, drad, dopa, parts={self.name: val})


class WeightedSum(LossTerm):
    name = "L_total"

    def __init__(self, terms: Sequence[LossTerm], weights: Optional[Sequence[float]] = None):
        self.terms = list(terms)
        self.weights = [1.0] * len(self.terms) if weights is None else [float(w) for w in weights]
        if len(self.weights) != len(self.terms):
            raise ValueError("one weight per term")
        for t in self.terms:
            check_registered(t)

    def frames(self):
        out = set()
        for t in self.terms:
            out |= t.frames()
        return out

    def restrict(self, frames):
        return WeightedSum([t.restrict(frames) for t in self.terms], self.weights)

    def evaluate(self, frame, positions, radii, opacities, need_grad):
        total = TermValue(0.0)
        for w, t in zip(self.weights, self.terms):
            r = t.evaluate(frame, positions, radii, opacities, need_grad)
            total.value += w * r.value
            for k, v in r.parts.items():
                total.parts[k] = total.parts.get(k, 0.0) + w * v
            if need_grad:
                total.dpos = _add(total.dpos, None if r.dpos is None else w * r.dpos)
                total.drad = _add(total.drad, None if r.drad is None else w * r.drad)
                total.dopa = _add(total.dopa, None if r.dopa is None else w * r.dopa)
        return total


REGISTERED = (PositionMSE, ChamferTerm, ImageTerm, WeightedSum)


def check_registered(loss) -> None:
    if type(loss) not in REGISTERED:
        raise ContractError(f"{type(loss).__name__} is not a registered differentiable loss primitive")


# -------------------------------------------------------------- gradients

@dataclass
class ParamGradients:
    d_v0: np.ndarray
    d_material: np.ndarray  # raw (optimisation) coordinates, one slot per active field
    d_x0: np.ndarray
    d_radii: np.ndarray
    d_opacities: np.ndarray
    d_material_physical: dict = field(default_factory=dict)

    def check_finite(self) -> None:
        for k in ("d_v0", "d_material", "d_x0", "d_radii", "d_opacities"):
            if not np.all(np.isfinite(getattr(self, k))):
                raise NumericFailureError(-1, f"gradient {k}")


@dataclass
class AdjointTape:
    """Checkpointed forward states; ``checkpoints[i]`` is the state before substep ``i * stride``."""

    stride: int
    checkpoints: list
    dts: list
    frame_at_step: dict  # state index (after that many substeps) -> frame index

    @property
    def total_substeps(self) -> int:
        return len(self.dts)


def checkpoint_schedule(total_substeps: int, memory_budget: int) -> int:
    """Smallest stride whose stored states (including both ends) fit in the budget."""
    if memory_budget < 2:
        raise InfeasibleBudgetError(f"a budget of {memory_budget} states cannot hold the two endpoint states")
    if total_substeps <= 0:
        return 1
    return max(1, math.ceil(total_substeps / (memory_budget - 1)))


@dataclass
class Problem:
    """Inputs that stay fixed while gradients are taken."""

    scene: Scene
    loss: LossTerm
    timestamps: np.ndarray
    plan: Optional[tuple] = None
    memory_budget: int = DEFAULT_STATE_BUDGET


@dataclass
class Evaluation:
    loss: float
    parts: dict
    trajectory_positions: list
    grads: Optional[ParamGradients] = None
    plan: Optional[tuple] = None
    min_branch_margin: float = float("inf")
    branches: Optional[np.ndarray] = None  # branch id per (substep, particle) when monitored


def _expand_plan(plan):
    counts, dts = plan
    per_step, frame_at = [], {}
    s = 0
    for f, (n, dt) in enumerate(zip(counts, dts), start=1):
        per_step += [dt] * n
        s += n
        frame_at[s] = f
    return per_step, frame_at


def run(scene: Scene, material: MaterialParams, v0, loss: LossTerm, timestamps, *, x0=None, radii=None,
        opacities=None, need_grad: bool = True, plan=None, memory_budget: int = DEFAULT_STATE_BUDGET,
        stride: Optional[int] = None, monitor_branches: bool = False) -> Evaluation:
    """Simulate, evaluate ``loss`` and (optionally) backpropagate to all parameter groups."""
    check_registered(loss)
    base = scene.particles
    x0 = np.array(base.positions if x0 is None else x0, dtype=float)
    radii = np.array(base.radii if radii is None else radii, dtype=float)
    opacities = np.array(base.opacities if opacities is None else opacities, dtype=float)
    v0 = np.asarray(scene.v0 if v0 is None else v0, dtype=float)
    ts = np.asarray(timestamps, dtype=float)
    used = loss.frames()
    last = max(used) if used else 0
    ts_run = ts[: last + 1]
    if plan is None:
        plan = substep_plan(scene, material, ts)
    plan_run = (tuple(plan[0][:last]), tuple(plan[1][:last]))
    dts, frame_at = _expand_plan(plan_run)
    cfg = StepConfig.from_scene(scene)
    S = len(dts)
    k = stride if stride is not None else checkpoint_schedule(S, memory_budget)

    st = State.initial(x0, v0)
    checkpoints = [st.copy()]
    positions = [st.x.copy()]
    total, parts = 0.0, {}
    frame_adj = {}
    drad = np.zeros(len(x0))
    dopa = np.zeros(len(x0))

    def visit(frame, x):
        nonlocal total, drad, dopa
        if frame not in used:
            return
        r = loss.evaluate(frame, x, radii, opacities, need_grad)
        total += r.value
        for kk, vv in r.parts.items():
            parts[kk] = parts.get(kk, 0.0) + vv
        if need_grad:
            if r.dpos is not None:
                frame_adj[frame] = r.dpos
            if r.drad is not None:
                drad = drad + r.drad
            if r.dopa is not None:
                dopa = dopa + r.dopa

    margin = float("inf")
    branches = [] if monitor_branches else None
    visit(0, st.x)
    for s in range(S):
        if monitor_branches:
            margin = min(margin, float(np.min(branch_margin(material, st.F, st.C), initial=np.inf)))
            branches.append(branch_id(material, st.F, st.C))
        st, _ = substep(st, material, cfg, dts[s], s)
        if (s + 1) % k == 0 and s + 1 < S:
            checkpoints.append(st.copy())
        if s + 1 in frame_at:
            positions.append(st.x.copy())
            visit(frame_at[s + 1], st.x)
    if branches is not None:
        branches = np.array(branches).reshape(S, len(x0))
    if not need_grad:
        return Evaluation(total, parts, positions, None, plan, margin, branches)

    tape = AdjointTape(k, checkpoints, dts, frame_at)
    bar, phys = backward(tape, material, cfg, frame_adj, len(x0))
    names = material.active
    d_phys = np.array([phys.get(n, 0.0) for n in names])
    raw = params_to_raw(material)
    grads = ParamGradients(
        d_v0=bar.v.sum(axis=0),
        d_material=d_phys * raw_jacobian(raw, material),
        d_x0=bar.x,
        d_radii=drad,
        d_opacities=dopa,
        d_material_physical={n: float(phys.get(n, 0.0)) for n in names},
    )
    grads.check_finite()
    return Evaluation(total, parts, positions, grads, plan, margin, branches)


def backward(tape: AdjointTape, material: MaterialParams, cfg: StepConfig, frame_adj: dict, n: int):
    """Reverse sweep over checkpoint windows; returns start-state adjoints and material gradients."""
    S = tape.total_substeps
    k = tape.stride
    bar = State(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros((n, 3, 3)))
    phys: dict = {}
    n_windows = len(tape.checkpoints)
    for w in range(n_windows - 1, -1, -1):
        lo, hi = w * k, min((w + 1) * k, S)
        st = tape.checkpoints[w].copy()
        caches = []
        for s in range(lo, hi):
            st, c = substep(st, material, cfg, tape.dts[s], s, keep_cache=True)
            caches.append(c)
        for s in range(hi - 1, lo - 1, -1):
            f = tape.frame_at_step.get(s + 1)
            if f is not None and f in frame_adj:
                bar.x = bar.x + frame_adj[f]
            bar, g = substep_backward(caches[s - lo], bar, material, cfg)
            if not (np.all(np.isfinite(bar.x)) and np.all(np.isfinite(bar.v))
                    and np.all(np.isfinite(bar.F)) and np.all(np.isfinite(bar.C))):
                raise NumericFailureError(s, "adjoint")
            for kk, vv in g.items():
                phys[kk] = phys.get(kk, 0.0) + vv
        caches.clear()
    if 0 in frame_adj:
        bar.x = bar.x + frame_adj[0]
    return bar, phys


def grad(scene: Scene, material: MaterialParams, v0, loss_fn: LossTerm, which_params=PARAM_GROUPS,
         timestamps=None, **kw) -> tuple[float, ParamGradients]:
    """Loss value and gradients; groups not in ``which_params`` come back as zeros."""
    if timestamps is None:
        raise ValueError("timestamps are required")
    ev = run(scene, material, v0, loss_fn, timestamps, need_grad=True, **kw)
    g = ev.grads
    which = set(which_params)
    unknown = which - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    if "v0" not in which:
        g.d_v0 = np.zeros_like(g.d_v0)
    if "material" not in which:
        g.d_material = np.zeros_like(g.d_material)
    if "x0" not in which:
        g.d_x0 = np.zeros_like(g.d_x0)
    if "appearance" not in which:
        g.d_radii = np.zeros_like(g.d_radii)
        g.d_opacities = np.zeros_like(g.d_opacities)
    return ev.loss, g


def evaluate(scene: Scene, material: MaterialParams, v0, loss_fn: LossTerm, timestamps, **kw) -> float:
    return run(scene, material, v0, loss_fn, timestamps, need_grad=False, **kw).loss


# ------------------------------------------------------------ FD oracle

def fd_step(theta: np.ndarray) -> np.ndarray:
    return np.maximum(1e-5, 1e-4 * np.abs(theta))


def central_difference(f: Callable[[np.ndarray], float], theta, h=None) -> np.ndarray:
    """Central differences with the adaptive per-coordinate step ``max(1e-5, 1e-4|theta|)``."""
    theta = np.asarray(theta, dtype=float)
    flat = theta.ravel()
    hs = fd_step(flat) if h is None else np.broadcast_to(np.asarray(h, float), flat.shape)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        tp = flat.copy()
        tm = flat.copy()
        tp[i] += hs[i]
        tm[i] -= hs[i]
        out[i] = (f(tp.reshape(theta.shape)) - f(tm.reshape(theta.shape))) / (2.0 * hs[i])
    return out.reshape(theta.shape)


def fd_gradient(scene: Scene, material: MaterialParams, v0, loss_fn: LossTerm, param_selector: str,
                h=None, timestamps=None, plan=None, **kw) -> np.ndarray:
    """Finite-difference gradient for one parameter group in the raw coordinates.

    The substep schedule is frozen at the unperturbed material's schedule so the
    perturbed runs differ only in the parameter itself.
    """
    if timestamps is None:
        raise ValueError("timestamps are required")
    v0 = np.asarray(scene.v0 if v0 is None else v0, dtype=float)
    plan = substep_plan(scene, material, timestamps) if plan is None else plan

    def ev(mat, vel, **extra):
        return run(scene, mat, vel, loss_fn, timestamps, need_grad=False, plan=plan, **{**kw, **extra}).loss

    if param_selector == "v0":
        return central_difference(lambda t: ev(material, t), v0, h)
    if param_selector == "material":
        raw = params_to_raw(material)
        return central_difference(lambda t: ev(raw_to_params(t, material), v0), raw, h)
    if param_selector == "x0":
        x0 = np.asarray(kw.pop("x0", scene.particles.positions), float)
        return central_difference(lambda t: ev(material, v0, x0=t), x0, h)
    if param_selector == "radii":
        r = np.asarray(kw.pop("radii", scene.particles.radii), float)
        return central_difference(lambda t: ev(material, v0, radii=t), r, h)
    if param_selector == "opacities":
        o = np.asarray(kw.pop("opacities", scene.particles.opacities), float)
        return central_difference(lambda t: ev(material, v0, opacities=t), o, h)
    raise ValueError(f"unknown parameter selector {param_selector!r}")
