"""Adam, cosine learning-rate schedules and the staged strategy scheduler.

A fit works on four parameter groups:

- ``v0``: global initial velocity (3,)
- ``material``: raw optimisation coordinates of the active material fields
- ``x0``: initial particle positions (N, 3)
- ``appearance``: log radii and logit opacities, concatenated (2N,)

A :class:`StrategyPlan` is an ordered list of :class:`StageConfig`; each stage
optimises a subset of the groups on a subset of the training frames and hands
its best iterate to the next stage.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import geomloss
from .core import LossWeights, MaterialModel, MaterialParams, Scene, params_to_raw, raw_to_params
from .diffsim import ChamferTerm, ImageTerm, WeightedSum, run
from .materials import InversionError, NumericError
from .mpm import DivergenceError, DomainEscapeError, NumericFailureError
from .render import RenderError

log = logging.getLogger(__name__)

GROUPS = ("v0", "material", "x0", "appearance")
DEFAULT_LR = {"v0": 1e-1, "material": 1e-1, "x0": 1e-3, "appearance": 1e-3}
STAGE1_FRAMES = 3
OPACITY_EPS = 1e-6

# Anything the forward model can throw when a parameter guess is unstable.
SIM_FAILURES = (DomainEscapeError, DivergenceError, NumericFailureError, NumericError, InversionError,
                RenderError, FloatingPointError)


class NonFiniteGradientError(FloatingPointError):
    """A NaN or inf reached the optimiser."""


# ------------------------------------------------------------ schedules

def cosine_lr(it: int, total: int, lr0: float, floor_fraction: float = 0.25) -> float:
    """Cosine annealing from ``lr0`` at ``it=0`` to ``floor_fraction*lr0`` at ``it=total``."""
    if total <= 0:
        raise ValueError("cosine schedule needs total > 0")
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    floor = floor_fraction * lr0
    return floor + (lr0 - floor) * 0.5 * (1.0 + math.cos(math.pi * it / total))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x) -> "AdamState":
        x = np.asarray(x, dtype=float)
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(theta, state: AdamState, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    g = np.asarray(grads, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if g.shape != state.m.shape or theta.shape != g.shape:
        raise ValueError(f"shape mismatch: params {theta.shape}, grads {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g.ravel()))
        raise NonFiniteGradientError(f"non-finite gradient at {bad.size} entries (first flat index {bad[0]})")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return theta - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


# --------------------------------------------------------------- plans

@dataclass(frozen=True)
class FirstK:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("FirstK needs k >= 1")

    def select(self, frames: Sequence[int]) -> tuple[int, ...]:
        fs = sorted(frames)
        if self.k > len(fs):
            raise ValueError(f"FirstK({self.k}) exceeds the {len(fs)} available frames")
        return tuple(fs[: self.k])


@dataclass(frozen=True)
class AllFrames:
    def select(self, frames: Sequence[int]) -> tuple[int, ...]:
        return tuple(sorted(frames))


FrameSelector = Union[FirstK, AllFrames]


@dataclass(frozen=True)
class StageConfig:
    name: str
    active_params: frozenset
    frames: FrameSelector
    iterations: int
    lr_overrides: dict = field(default_factory=dict)
    floor_fraction: float = 0.25  # cosine schedule ends at this fraction of the initial rate
    lr_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "active_params", frozenset(self.active_params))
        bad = self.active_params - set(GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")
        if not self.active_params:
            raise ValueError("a stage must optimise at least one group")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")

    def lr(self, group: str) -> float:
        return self.lr_scale * self.lr_overrides.get(group, DEFAULT_LR[group])


@dataclass(frozen=True)
class StrategyPlan:
    name: str
    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a plan needs at least one stage")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)


# Stage iterations and schedule per material (stage 1, 2, 3), with lr floor and scale.
MATERIAL_SCHEDULES = {
    MaterialModel.ELASTIC: ((100, 100, 100), 0.25, 1.0),
    MaterialModel.SAND: ((100, 100, 150), 0.25, 1.0),
    MaterialModel.NEWTONIAN: ((50, 50, 300), 0.25, 1.0),
    MaterialModel.NONNEWTONIAN: ((50, 350, 50), 1.0, 1.0),
    MaterialModel.PLASTICINE: ((50, 300, 50), 1.0, 0.5),
}


def _schedule(model, iterations):
    its, floor, scale = MATERIAL_SCHEDULES[MaterialModel(model)]
    if iterations is not None:
        its = tuple(iterations)
    return its, floor, scale


def progressive_plan(model="elastic", iterations=None, k: int = STAGE1_FRAMES, lr_overrides=None) -> StrategyPlan:
    its, floor, scale = _schedule(model, iterations)
    lo = dict(lr_overrides or {})
    return StrategyPlan("progressive", (
        StageConfig("stage1", {"v0"}, FirstK(k), its[0], lo, floor, scale),
        StageConfig("stage2", {"v0", "material"}, AllFrames(), its[1], lo, floor, scale),
        StageConfig("stage3", set(GROUPS), AllFrames(), its[2], lo, floor, scale),
    ))


def sequential_plan(model="elastic", iterations=None, k: int = STAGE1_FRAMES, lr_overrides=None) -> StrategyPlan:
    """Velocity from the first frames, then material alone with velocity frozen.

    Uses the same total budget as the progressive plan; the material stage gets
    the stage-2 and stage-3 iterations together.
    """
    its, floor, scale = _schedule(model, iterations)
    lo = dict(lr_overrides or {})
    return StrategyPlan("sequential", (
        StageConfig("velocity", {"v0"}, FirstK(k), its[0], lo, floor, scale),
        StageConfig("material", {"material"}, AllFrames(), its[1] + its[2], lo, floor, scale),
    ))


def fulljoint_plan(model="elastic", iterations=None, lr_overrides=None, **_) -> StrategyPlan:
    its, floor, scale = _schedule(model, iterations)
    lo = dict(lr_overrides or {})
    return StrategyPlan("fulljoint", (
        StageConfig("joint", set(GROUPS), AllFrames(), sum(its), lo, floor, scale),
    ))


PLANS = {"progressive": progressive_plan, "sequential": sequential_plan, "fulljoint": fulljoint_plan}


def make_plan(name: str, model="elastic", **kw) -> StrategyPlan:
    try:
        factory = PLANS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(PLANS)}") from None
    return factory(model, **kw)


# -------------------------------------------------------------- problem

def _logit(p):
    p = np.clip(p, OPACITY_EPS, 1.0 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class FitParams:
    """Current guess in optimisation coordinates."""

    v0: np.ndarray
    material: np.ndarray
    x0: np.ndarray
    appearance: np.ndarray  # [log radii, logit opacities]
    template: MaterialParams

    @classmethod
    def from_physical(cls, v0, material: MaterialParams, x0, radii, opacities) -> "FitParams":
        return cls(np.array(v0, float), params_to_raw(material), np.array(x0, float),
                   np.concatenate([np.log(np.asarray(radii, float)), _logit(np.asarray(opacities, float))]),
                   material)

    @property
    def n(self) -> int:
        return len(self.x0)

    @property
    def material_params(self) -> MaterialParams:
        return raw_to_params(self.material, self.template)

    @property
    def radii(self) -> np.ndarray:
        return np.exp(self.appearance[: self.n])

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.appearance[self.n:])

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def with_group(self, name: str, value) -> "FitParams":
        return replace(self, **{name: np.asarray(value, float)})

    def copy(self) -> "FitParams":
        return FitParams(self.v0.copy(), self.material.copy(), self.x0.copy(), self.appearance.copy(),
                         self.template)


@dataclass
class FitProblem:
    """Observations and fixed settings for a fit.

    ``scene`` supplies masses, volumes, grid and boundary settings; its
    particle positions are not used once a :class:`FitParams` is given.
    ``cd_targets`` maps frame index to target positions (from the stage-0
    reconstruction); ``observations`` maps ``(frame, camera)`` to alpha maps.
    """

    scene: Scene
    timestamps: np.ndarray
    train_frames: tuple
    observations: dict
    cameras: list
    cd_targets: dict
    weights: LossWeights = field(default_factory=LossWeights)
    x0_reference: Optional[np.ndarray] = None  # ground truth, only for diagnostics

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float)
        self.train_frames = tuple(sorted(int(f) for f in self.train_frames))
        if not self.train_frames:
            raise ValueError("no training frames")
        if max(self.train_frames) >= len(self.timestamps):
            raise ValueError("training frame beyond the timestamps")

    def loss(self, frames) -> WeightedSum:
        fs = set(frames)
        obs = {k: v for k, v in self.observations.items() if k[0] in fs}
        cams_used = {c for _, c in self.observations}
        img_w = self.weights.img_weight(max(len(cams_used), 1))
        terms, ws = [], []
        if obs:
            terms.append(ImageTerm(obs, self.cameras, self.weights, weight=img_w))
            ws.append(1.0)
        cd = {t: x for t, x in self.cd_targets.items() if t in fs}
        if cd and self.weights.lambda_cd > 0:
            terms.append(ChamferTerm(cd, self.weights.lambda_cd))
            ws.append(1.0)
        if not terms:
            raise ValueError("the selected frames carry no observations")
        return WeightedSum(terms, ws)

    def x0_error(self, x0) -> float:
        """Chamfer distance of the current initial positions to the reference."""
        if self.x0_reference is None:
            return float("nan")
        return geomloss.chamfer(x0, self.x0_reference)


@dataclass
class Objective:
    value: float
    parts: dict
    grads: Optional[dict] = None  # group -> gradient in optimisation coordinates


def evaluate_objective(problem: FitProblem, params: FitParams, frames, need_grad: bool = True) -> Objective:
    loss = problem.loss(frames)
    scene = problem.scene
    mat = params.material_params
    radii, opac = params.radii, params.opacities
    ev = run(scene, mat, params.v0, loss, problem.timestamps, x0=params.x0, radii=radii,
             opacities=opac, need_grad=need_grad)
    if not np.isfinite(ev.loss):
        raise NumericFailureError(-1, "objective")
    if not need_grad:
        return Objective(ev.loss, dict(ev.parts))
    g = ev.grads
    grads = {
        "v0": g.d_v0,
        "material": g.d_material,
        "x0": g.d_x0,
        "appearance": np.concatenate([g.d_radii * radii, g.d_opacities * opac * (1.0 - opac)]),
    }
    return Objective(ev.loss, dict(ev.parts), grads)


# --------------------------------------------------------------- stages

@dataclass
class StageResult:
    name: str
    best: FitParams
    best_loss: float
    best_iter: int
    trace: list  # dict rows
    diverged: bool = False
    note: str = ""


@dataclass
class FitResult:
    strategy: str
    params: FitParams
    stages: list
    wall_time: float
    diverged: bool = False

    @property
    def x0_error_trace(self) -> list:
        return [row["x0_err"] for s in self.stages for row in s.trace]

    @property
    def trace(self) -> list:
        return [row for s in self.stages for row in s.trace]


def _trace_row(it, stage, obj: Objective, lr, params: FitParams, x0_err) -> dict:
    row = {"iter": it, "stage": stage, "total": obj.value,
           "L_img": obj.parts.get("L_img", 0.0), "L_CD": obj.parts.get("L_CD", 0.0), "lr": lr}
    for i, c in enumerate("xyz"):
        row[f"v0_{c}"] = float(params.v0[i])
    mat = params.material_params
    for name in mat.active:
        row[name] = float(getattr(mat, name))
    row["x0_err"] = x0_err
    return row


def run_stage(problem: FitProblem, stage: StageConfig, params: FitParams, adam: Optional[dict] = None,
              seed: int = 0) -> tuple[StageResult, dict]:
    """Adam on the stage's active groups; inactive groups are never written.

    Returns the best iterate (lowest objective, including the starting point)
    and the Adam states so a caller can carry them over if it wants.
    """
    del seed  # optimisation is deterministic; kept for a uniform call signature
    frames = stage.frames.select(problem.train_frames)
    active = [g for g in GROUPS if g in stage.active_params]
    adam = {g: AdamState.zeros_like(params.group(g)) for g in active} if adam is None else dict(adam)
    for g in active:
        adam.setdefault(g, AdamState.zeros_like(params.group(g)))
    trace = []
    try:
        obj = evaluate_objective(problem, params, frames)
    except SIM_FAILURES as e:
        log.warning("%s: initial evaluation failed (%s)", stage.name, e)
        return StageResult(stage.name, params, float("inf"), 0, trace, True, f"initial: {e}"), adam
    trace.append(_trace_row(0, stage.name, obj, 0.0, params, problem.x0_error(params.x0)))
    best, best_loss, best_iter = params, obj.value, 0
    cur = params
    note, diverged = "", False
    for it in range(stage.iterations):
        last = it == stage.iterations - 1
        for attempt in (0, 1):
            frac = 0.5 ** attempt
            new, new_adam = cur, dict(adam)
            for g in active:
                lr = frac * cosine_lr(it, stage.iterations, stage.lr(g), stage.floor_fraction)
                theta, new_adam[g] = adam_step(cur.group(g), adam[g], obj.grads[g], lr)
                new = new.with_group(g, theta)
            try:
                nobj = evaluate_objective(problem, new, frames, need_grad=not last)
                break
            except SIM_FAILURES as e:
                log.warning("%s iter %d: simulation failed (%s); lr scale %.2f", stage.name, it + 1, e, frac)
                note = f"iter {it + 1}: {e}"
        else:
            diverged = True
            break
        cur, adam, obj = new, new_adam, nobj
        lr_v = frac * cosine_lr(it, stage.iterations, stage.lr(active[0]), stage.floor_fraction)
        trace.append(_trace_row(it + 1, stage.name, obj, lr_v, cur, problem.x0_error(cur.x0)))
        if obj.value < best_loss:
            best, best_loss, best_iter = cur, obj.value, it + 1
    return StageResult(stage.name, best.copy(), best_loss, best_iter, trace, diverged, note), adam


def run_strategy(problem: FitProblem, plan: StrategyPlan, init: FitParams,
                 reset_optimizer_per_stage: bool = True) -> FitResult:
    t0 = time.perf_counter()
    params = init.copy()
    stages = []
    adam = None
    diverged = False
    for stage in plan.stages:
        log.info("%s/%s: %d iterations on %s", plan.name, stage.name, stage.iterations,
                 sorted(stage.active_params))
        res, adam_out = run_stage(problem, stage, params, None if reset_optimizer_per_stage else adam)
        adam = adam_out
        stages.append(res)
        params = res.best
        if res.diverged:
            diverged = True
            log.warning("%s stopped after %s: %s", plan.name, stage.name, res.note)
            break
    return FitResult(plan.name, params, stages, time.perf_counter() - t0, diverged)


def write_trace(path, result: FitResult) -> None:
    rows = result.trace
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
