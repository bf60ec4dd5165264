"""Adjoint vs central-difference check on small randomized scenes, one per material model.

Scenes whose plastic states come within 1% of a return-mapping branch switch
are redrawn: the derivative jumps there and finite differences straddle the
kink. A draw is also redrawn when any perturbed finite-difference run takes a
different branch than the base run somewhere, or changes a Chamfer
nearest-neighbour assignment (the loss has a kink there too). Every redraw is
logged.
"""
from __future__ import annotations

import logging
import time

import numpy as np

from .core import MaterialModel, MaterialParams, Scene, sample_shape
from .core import params_to_raw, raw_to_params
from . import kernels as K
from .diffsim import ChamferTerm, central_difference, run
from .mpm import DivergenceError, DomainEscapeError, NumericFailureError, substep_plan

log = logging.getLogger(__name__)

BRANCH_MARGIN = 0.01
MAX_SUBSTEPS = 20
MAX_PARTICLES = 200
MAX_DRAWS = 200
GRID = 16


def _draw_material(model: MaterialModel, rng) -> MaterialParams:
    if model is MaterialModel.ELASTIC:
        return MaterialParams(model, E=10 ** rng.uniform(3.0, 3.7), nu=rng.uniform(0.2, 0.4))
    if model is MaterialModel.PLASTICINE:
        return MaterialParams(model, E=10 ** rng.uniform(3.0, 3.7), nu=rng.uniform(0.2, 0.4),
                              tau_y=10 ** rng.uniform(-0.5, 1.5))
    if model is MaterialModel.NEWTONIAN:
        return MaterialParams(model, mu_visc=10 ** rng.uniform(0.0, 1.0), kappa=10 ** rng.uniform(3.0, 3.5))
    if model is MaterialModel.NONNEWTONIAN:
        return MaterialParams(model, mu_visc=10 ** rng.uniform(2.5, 3.5), kappa=10 ** rng.uniform(3.0, 3.5),
                              tau_y=10 ** rng.uniform(-1.0, 1.5), eta=10 ** rng.uniform(-1.0, 1.0))
    return MaterialParams(model, theta_fric=rng.uniform(20.0, 40.0), E=10 ** rng.uniform(3.0, 3.7))


def random_case(model, seed: int):
    """A small sticky-floor drop scene and a Chamfer loss against shifted copies of the start."""
    model = MaterialModel(model)
    rng = np.random.default_rng(seed)
    mat = _draw_material(model, rng)
    size = rng.uniform(0.12, 0.25)
    ppc = int(rng.choice([1, 1, 8]))
    center = (0.5, 0.5 * size + 0.19 + rng.uniform(0.0, 0.05), 0.5)
    ps = sample_shape("cube", center, size, ppc, GRID, seed=seed)
    if len(ps) > MAX_PARTICLES:
        ps = ps.replace(**{k: getattr(ps, k)[:MAX_PARTICLES] for k in
                           ("positions", "velocities", "masses", "volumes", "deformation_gradients",
                            "affine_velocities", "radii", "opacities")})
    v0 = np.array([rng.uniform(-1, 1), -rng.uniform(1, 3), rng.uniform(-1, 1)])
    scene = Scene(ps, v0, mat, grid_resolution=GRID, boundary="sticky", dt=5e-3)
    ts = np.arange(5) * 0.02
    plan = substep_plan(scene, mat, ts)
    while sum(plan[0]) > MAX_SUBSTEPS:
        ts = ts[:-1]
        plan = substep_plan(scene, mat, ts)
    shift = rng.normal(scale=0.02, size=3)
    loss = ChamferTerm({t: ps.positions + shift * t for t in range(1, len(ts))})
    return scene, mat, ts, plan, loss


def branches_differ(a, b) -> bool:
    """True if some state is on different branches in the two runs (-1 matches anything)."""
    return bool(np.any((a != b) & (a >= 0) & (b >= 0)))


def assignments(loss: ChamferTerm, positions) -> list:
    """Nearest-neighbour indices in both directions for every frame of a Chamfer loss."""
    out = []
    for t in sorted(loss.targets):
        y = loss.targets[t]
        out += [K.nearest(positions[t], y)[0], K.nearest(y, positions[t])[0]]
    return out


def rel_err(a, f, floor: float) -> np.ndarray:
    a, f = np.asarray(a, float), np.asarray(f, float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def check_model(model, seed: int = 0, tol: float = 1e-3, margin: float = BRANCH_MARGIN):
    """Rows of (param, adjoint, fd, rel_err) for the first admissible draw."""
    model = MaterialModel(model)
    excluded = 0
    for k in range(MAX_DRAWS):
        draw = 1000 * seed + k
        scene, mat, ts, plan, loss = random_case(model, draw)
        try:
            ev = run(scene, mat, scene.v0, loss, ts, plan=plan, monitor_branches=True)
        except (DomainEscapeError, DivergenceError, NumericFailureError) as e:
            log.info("%s draw %d rejected: %s", model.value, draw, e)
            continue
        if ev.min_branch_margin < margin:
            excluded += 1
            log.info("%s draw %d excluded: branch margin %.2e < %.2e", model.value, draw,
                     ev.min_branch_margin, margin)
            continue
        g = ev.grads
        switched = []
        nn0 = assignments(loss, ev.trajectory_positions)

        def f(vel, raw):
            e = run(scene, raw_to_params(raw, mat), vel, loss, ts, plan=plan, need_grad=False,
                    monitor_branches=True)
            if branches_differ(e.branches, ev.branches):
                switched.append("branch")
            elif any(not np.array_equal(a, b) for a, b in zip(assignments(loss, e.trajectory_positions), nn0)):
                switched.append("nearest")
            return e.loss

        raw0 = params_to_raw(mat)
        fd_v = central_difference(lambda t: f(t, raw0), scene.v0)
        fd_m = central_difference(lambda t: f(scene.v0, t), raw0)
        if switched:
            excluded += 1
            log.info("%s draw %d excluded: perturbed runs changed %s", model.value, draw,
                     ", ".join(sorted(set(switched))))
            continue
        adj = np.concatenate([g.d_v0, g.d_material])
        fd = np.concatenate([fd_v, fd_m])
        floor = 1e-9 * float(np.max(np.abs(fd)))
        err = rel_err(adj, fd, floor)
        names = ["v0_x", "v0_y", "v0_z"] + [f"raw_{n}" for n in mat.active]
        rows = [dict(model=model.value, param=n, adjoint=float(a), fd=float(f), rel_err=float(e),
                     ok=bool(e <= tol), draw=draw, particles=len(scene.particles),
                     substeps=int(sum(plan[0])), branch_margin=float(ev.min_branch_margin),
                     excluded_draws=excluded)
                for n, a, f, e in zip(names, adj, fd, err)]
        return rows
    raise RuntimeError(f"no admissible {model.value} scene in {MAX_DRAWS} draws")


def gradcheck_all(seed: int = 0, models=None, tol: float = 1e-3):
    models = [MaterialModel(m) for m in (models or [m.value for m in MaterialModel])]
    rows = []
    t0 = time.perf_counter()
    for m in models:
        rows += check_model(m, seed, tol)
    log.info("gradcheck finished in %.1f s", time.perf_counter() - t0)
    return rows, all(r["ok"] for r in rows)
