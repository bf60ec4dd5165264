"""Synthetic benchmark: ground-truth generation, stage-0 reconstruction, strategy
fits, metrics and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geomloss, render
from .core import (LOG_FIELDS, Boundary, LossWeights, MaterialModel, MaterialParams, Scene, Shape,
                   ring_cameras, sample_shape)
from .fileio import load_toml, write_ply
from .mpm import DivergenceError, DomainEscapeError, NumericFailureError, simulate
from .optengine import (SIM_FAILURES, FitParams, FitProblem, FitResult, make_plan, run_strategy, write_trace)
from .rep4d import Stage0Config, Stage0Result, fit_stage0
from .render import write_pgm

log = logging.getLogger(__name__)

SPARSE_CAMERAS = (1, 5, 9)
PSNR_CAP = 99.0
OBS_NOISE = 0.002
OCCLUSION_RADIUS_PX = 1.5


class SpecError(ValueError):
    """The experiment cannot run as specified (e.g. unstable ground truth)."""


# --------------------------------------------------------------- configs

@dataclass(frozen=True)
class SceneConfig:
    name: str
    shape: str
    center: tuple
    scale: float
    material: MaterialParams
    v0: tuple
    guess: MaterialParams  # starting point of the fit
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    minor_ratio: float = 1.0 / 3.0
    particles_per_cell: int = 8
    grid_resolution: int = 32
    gravity: tuple = (0.0, -9.8, 0.0)
    boundary: str = "separating"
    ground_friction: float = 0.5
    density: float = 1000.0
    n_frames: int = 20
    fps: float = 60.0
    image_size: int = 128
    seed: int = 0

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.fps

    def build(self) -> Scene:
        ps = sample_shape(self.shape, self.center, self.scale, self.particles_per_cell, self.grid_resolution,
                          seed=self.seed, density=self.density, rotation_deg=self.rotation_deg,
                          minor_ratio=self.minor_ratio)
        return Scene(ps, np.asarray(self.v0, float), self.material, np.asarray(self.gravity, float),
                     grid_resolution=self.grid_resolution, ground_friction=self.ground_friction,
                     boundary=Boundary(self.boundary), density=self.density)


CATALOG = {
    "elastic-cube-drop": SceneConfig(
        "elastic-cube-drop", "cube", (0.42, 0.40, 0.45), 0.25,
        MaterialParams("elastic", E=1e5, nu=0.3), (0.8, -1.0, 0.4),
        MaterialParams("elastic", E=3e5, nu=0.2), rotation_deg=(20.0, 25.0, 0.0)),
    "elastic-torus-bounce": SceneConfig(
        "elastic-torus-bounce", "torus", (0.45, 0.40, 0.50), 0.15,
        MaterialParams("elastic", E=2e5, nu=0.25), (0.5, -1.5, 0.0),
        MaterialParams("elastic", E=6e5, nu=0.15), rotation_deg=(60.0, 0.0, 20.0)),
    "plasticine-cube-smash": SceneConfig(
        "plasticine-cube-smash", "cube", (0.45, 0.35, 0.50), 0.22,
        MaterialParams("plasticine", E=2e5, nu=0.3, tau_y=3e3), (0.5, -2.5, 0.0),
        MaterialParams("plasticine", E=5e5, nu=0.2, tau_y=1e4), rotation_deg=(0.0, 30.0, 0.0)),
    "newtonian-sphere-splash": SceneConfig(
        "newtonian-sphere-splash", "sphere", (0.50, 0.35, 0.50), 0.13,
        MaterialParams("newtonian", mu_visc=10.0, kappa=1e5), (0.0, -2.0, 0.0),
        MaterialParams("newtonian", mu_visc=50.0, kappa=3e5)),
    "sand-column-collapse": SceneConfig(
        "sand-column-collapse", "cube", (0.50, 0.30, 0.50), 0.20,
        MaterialParams("sand", theta_fric=30.0), (0.0, -1.0, 0.0),
        MaterialParams("sand", theta_fric=20.0)),
    "nonnewtonian-blob-drop": SceneConfig(
        "nonnewtonian-blob-drop", "sphere", (0.50, 0.35, 0.50), 0.13,
        MaterialParams("nonnewtonian", mu_visc=1e4, kappa=1e5, tau_y=1e3, eta=10.0), (0.3, -2.0, 0.0),
        MaterialParams("nonnewtonian", mu_visc=3e4, kappa=3e5, tau_y=3e3, eta=30.0)),
}


@dataclass(frozen=True)
class ExperimentSpec:
    scene: SceneConfig
    cameras: int = 10  # 10 (dense ring) or 3 (sparse subset)
    train_frames: int = 14
    strategies: tuple = ("progressive",)
    seeds: tuple = (0,)
    stage0: Stage0Config = field(default_factory=Stage0Config)
    iterations: Optional[tuple] = None  # per-stage override, else the material schedule
    weights: LossWeights = field(default_factory=LossWeights)
    obs_noise: float = OBS_NOISE
    reset_optimizer_per_stage: bool = True

    def __post_init__(self):
        if self.cameras not in (3, 10):
            raise SpecError("cameras must be 3 or 10")
        if not 1 <= self.train_frames < self.scene.n_frames:
            raise SpecError("need at least one training frame and one test frame")

    @property
    def camera_indices(self) -> tuple:
        return tuple(range(10)) if self.cameras == 10 else SPARSE_CAMERAS

    @property
    def novel_indices(self) -> tuple:
        return tuple(i for i in range(10) if i not in self.camera_indices)

    @property
    def train(self) -> tuple:
        return tuple(range(self.train_frames))

    @property
    def test(self) -> tuple:
        return tuple(range(self.train_frames, self.scene.n_frames))


# ----------------------------------------------------------- ground truth

@dataclass
class GroundTruth:
    scene: Scene
    positions: list  # per frame (N, 3)
    alphas: dict  # (t, c) -> (H, W) for every ring camera
    points: dict  # (t, c) -> visible, jittered points
    cameras: list
    timestamps: np.ndarray

    def observations(self, camera_indices, frames) -> dict:
        fs, cs = set(frames), set(camera_indices)
        return {k: v for k, v in self.alphas.items() if k[0] in fs and k[1] in cs}


def generate_ground_truth(spec: ExperimentSpec, out_dir=None) -> GroundTruth:
    sc = spec.scene
    scene = sc.build()
    cams = ring_cameras(10, image_size=sc.image_size)
    ts = sc.timestamps
    try:
        traj = simulate(scene, timestamps=ts)
    except (DomainEscapeError, DivergenceError, NumericFailureError) as e:
        raise SpecError(f"ground truth for {sc.name} is unstable: {e}") from e
    positions = [f.positions for f in traj.frames]
    rad, opa = scene.particles.radii, scene.particles.opacities
    rng = np.random.default_rng(sc.seed + 7919)
    alphas, points = {}, {}
    for t, x in enumerate(positions):
        for c, cam in enumerate(cams):
            alphas[(t, c)] = render.render_alpha(x, cam, rad, opa).values
            vis = geomloss.visible_subset(x, cam, OCCLUSION_RADIUS_PX)
            points[(t, c)] = vis + spec.obs_noise * rng.standard_normal(vis.shape)
    gt = GroundTruth(scene, positions, alphas, points, cams, ts)
    if out_dir is not None:
        write_ground_truth(gt, spec, out_dir)
    return gt


def write_ground_truth(gt: GroundTruth, spec: ExperimentSpec, out_dir) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "alpha").mkdir(exist_ok=True)
    (out / "points").mkdir(exist_ok=True)
    p = gt.scene.particles
    for t, x in enumerate(gt.positions):
        write_ply(out / "frames" / f"frame_{t:03d}.ply", x, p.radii, p.opacities)
    for (t, c), a in sorted(gt.alphas.items()):
        write_pgm(out / "alpha" / f"t{t:03d}_c{c:02d}.pgm", a)
    for (t, c), pts in sorted(gt.points.items()):
        if c in spec.camera_indices:
            write_ply(out / "points" / f"t{t:03d}_c{c:02d}.ply", pts)


# ---------------------------------------------------------------- fitting

def initial_params(spec: ExperimentSpec, stage0: Stage0Result) -> FitParams:
    p = stage0.particles
    return FitParams.from_physical(np.zeros(3), spec.scene.guess, p.positions, p.radii, p.opacities)


def build_problem(spec: ExperimentSpec, gt: GroundTruth, stage0: Stage0Result) -> FitProblem:
    sc = spec.scene
    scene = gt.scene.replace(particles=stage0.particles, v0=np.zeros(3), material=sc.guess)
    train = spec.train
    return FitProblem(scene, gt.timestamps, train, gt.observations(spec.camera_indices, train), gt.cameras,
                      stage0.targets(train), spec.weights, x0_reference=gt.positions[0])


def run_stage0(spec: ExperimentSpec, gt: GroundTruth, seed: int) -> Stage0Result:
    cfg = replace(spec.stage0, seed=seed, density=spec.scene.density)
    return fit_stage0(gt.observations(spec.camera_indices, spec.train), gt.cameras, cfg, spec.weights)


def fit(spec: ExperimentSpec, gt: GroundTruth, strategy: str, seed: int,
        stage0: Optional[Stage0Result] = None) -> tuple[FitResult, Stage0Result, FitProblem]:
    stage0 = run_stage0(spec, gt, seed) if stage0 is None else stage0
    problem = build_problem(spec, gt, stage0)
    plan = make_plan(strategy, spec.scene.material.model, iterations=spec.iterations)
    res = run_strategy(problem, plan, initial_params(spec, stage0), spec.reset_optimizer_per_stage)
    return res, stage0, problem


# ---------------------------------------------------------------- metrics

def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def param_mae(fitted: MaterialParams, truth: MaterialParams) -> dict:
    """Absolute error per active field; log10 space for scale parameters."""
    out = {}
    for name in truth.active:
        a, b = getattr(fitted, name), getattr(truth, name)
        if name in LOG_FIELDS:
            out[f"mae_log10_{name}"] = abs(math.log10(a) - math.log10(b))
        else:
            out[f"mae_{name}"] = abs(a - b)
    return out


METRIC_KEYS = ("cd", "emd", "psnr_seen", "ssim_seen", "psnr_novel", "ssim_novel", "mae_v0")


def compute_metrics(fit_result: FitResult, gt: GroundTruth, spec: ExperimentSpec, scene: Scene) -> dict:
    """Future-frame point and silhouette metrics plus parameter errors.

    ``scene`` carries the fitted particle masses/volumes (the stage-0 particles).
    """
    prm = fit_result.params
    mat = prm.material_params
    out = {"diverged": bool(fit_result.diverged), "note": ""}
    try:
        sim_scene = scene.replace(particles=scene.particles.replace(positions=prm.x0))
        traj = simulate(sim_scene, mat, prm.v0, gt.timestamps)
    except SIM_FAILURES as e:
        out.update({k: math.inf for k in METRIC_KEYS})
        out.update({k: math.inf for k in param_mae(mat, spec.scene.material)})
        out["diverged"] = True
        out["note"] = f"fitted simulation failed: {e}"
        return out
    cds, emds = [], []
    seen = {"psnr": [], "ssim": []}
    novel = {"psnr": [], "ssim": []}
    for t in spec.test:
        x, y = traj.frames[t].positions, gt.positions[t]
        cds.append(geomloss.chamfer_metric(x, y))
        a, b = geomloss.common_subsample(x, y, seed=t)
        emds.append(geomloss.emd(a, b).value)
        for c in range(10):
            img = render.render_alpha(x, gt.cameras[c], prm.radii, prm.opacities).values
            ref = gt.alphas[(t, c)]
            bucket = seen if c in spec.camera_indices else novel
            bucket["psnr"].append(psnr(img, ref))
            bucket["ssim"].append(render.ssim(img, ref))
    out["cd"] = float(np.mean(cds))
    out["emd"] = float(np.mean(emds))
    out["psnr_seen"] = float(np.mean(seen["psnr"]))
    out["ssim_seen"] = float(np.mean(seen["ssim"]))
    out["psnr_novel"] = float(np.mean(novel["psnr"])) if novel["psnr"] else float("nan")
    out["ssim_novel"] = float(np.mean(novel["ssim"])) if novel["ssim"] else float("nan")
    out["mae_v0"] = float(np.mean(np.abs(prm.v0 - np.asarray(spec.scene.v0, float))))
    out.update(param_mae(mat, spec.scene.material))
    return out


# -------------------------------------------------------------- benchmark

def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def report_rows(rows: list) -> str:
    """CSV text of per-run rows followed by mean and std rows per strategy."""
    if not rows:
        return ""
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    for strat in dict.fromkeys(r["strategy"] for r in rows):
        group = [r for r in rows if r["strategy"] == strat]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            line = []
            for c in cols:
                if c == "strategy":
                    line.append(strat)
                elif c == "seed":
                    line.append(stat)
                else:
                    vals = [r.get(c) for r in group]
                    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
                        with np.errstate(invalid="ignore"):
                            line.append(_fmt(float(fn(vals))))
                    else:
                        line.append("")
            w.writerow(line)
    return buf.getvalue()


def aggregate(rows: list, key: str) -> dict:
    """Mean and std of one metric per strategy."""
    out = {}
    for strat in dict.fromkeys(r["strategy"] for r in rows):
        vals = [r[key] for r in rows if r["strategy"] == strat and key in r]
        with np.errstate(invalid="ignore"):  # inf rows from failed runs
            out[strat] = (float(np.mean(vals)), float(np.std(vals)))
    return out


@dataclass
class BenchmarkResult:
    rows: list
    fits: dict  # (strategy, seed) -> FitResult
    ground_truth: GroundTruth
    summary: dict


def run_benchmark(spec: ExperimentSpec, out_dir=None, ground_truth: Optional[GroundTruth] = None,
                  stage0_cache: Optional[dict] = None) -> BenchmarkResult:
    """Every (strategy, seed) pair on one shared ground truth.

    A failing run is recorded with its error and the benchmark moves on.
    """
    t_start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    gt = ground_truth or generate_ground_truth(spec, out / "truth" if out is not None else None)
    stage0_cache = {} if stage0_cache is None else stage0_cache
    rows, fits, timings = [], {}, {}
    for seed in spec.seeds:
        key = (spec.cameras, seed)
        for strat in spec.strategies:
            row = {"strategy": strat, "seed": seed, "cameras": spec.cameras}
            try:
                if key not in stage0_cache:
                    stage0_cache[key] = run_stage0(spec, gt, seed)
                res, s0, problem = fit(spec, gt, strat, seed, stage0_cache[key])
                fits[(strat, seed)] = res
                row.update(compute_metrics(res, gt, spec, problem.scene))
                timings[f"{strat}/{seed}"] = res.wall_time
                if out is not None:
                    write_trace(out / "traces" / f"{strat}_seed{seed}.csv", res)
            except Exception as e:  # noqa: BLE001 - one failed run must not sink the table
                log.exception("run %s seed %d failed", strat, seed)
                row.update({k: math.inf for k in METRIC_KEYS})
                row.update({"diverged": True, "note": f"{type(e).__name__}: {e}"})
            rows.append(row)
    summary = {
        "scene": spec.scene.name,
        "cameras": spec.cameras,
        "seeds": list(spec.seeds),
        "strategies": list(spec.strategies),
        "cd": aggregate(rows, "cd"),
        "emd": aggregate(rows, "emd"),
        "wall_time_s": {"runs": timings, "total": time.perf_counter() - t_start},
    }
    if out is not None:
        (out / "report.csv").write_text(report_rows(rows))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
        write_gnuplot(out / "report.dat", rows)
    return BenchmarkResult(rows, fits, gt, summary)


def write_gnuplot(path, rows: list) -> None:
    """Whitespace-separated columns, one block per strategy."""
    keys = [k for k in ("seed",) + METRIC_KEYS]
    lines = []
    for strat in dict.fromkeys(r["strategy"] for r in rows):
        lines.append(f"# {strat}")
        lines.append("# " + " ".join(keys))
        for r in rows:
            if r["strategy"] == strat:
                lines.append(" ".join(_fmt(r.get(k, "nan")) for k in keys))
        lines += ["", ""]
    Path(path).write_text("\n".join(lines))


# ------------------------------------------------------------- config I/O

def _material_from(d: dict) -> MaterialParams:
    d = dict(d)
    return MaterialParams(d.pop("model"), **d)


def scene_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    base = d.pop("preset", None)
    if base is not None:
        cfg = CATALOG[base]
    else:
        cfg = None
    if "material" in d:
        d["material"] = _material_from(d["material"])
    if "guess" in d:
        d["guess"] = _material_from(d["guess"])
    for k in ("center", "v0", "rotation_deg", "gravity"):
        if k in d:
            d[k] = tuple(float(v) for v in d[k])
    if cfg is not None:
        return replace(cfg, **d)
    return SceneConfig(**d)


def spec_from_dict(d: dict) -> ExperimentSpec:
    d = dict(d)
    scene = scene_from_dict(d.pop("scene"))
    kw = {}
    if "stage0" in d:
        kw["stage0"] = Stage0Config(**d.pop("stage0"))
    if "weights" in d:
        kw["weights"] = LossWeights(**d.pop("weights"))
    exp = d.pop("experiment", {})
    exp.update(d)
    for k in ("strategies", "seeds", "iterations"):
        if k in exp and exp[k] is not None:
            exp[k] = tuple(exp[k])
    return ExperimentSpec(scene=scene, **exp, **kw)


def load_spec(path) -> ExperimentSpec:
    return spec_from_dict(load_toml(path))


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["scene"]["material"] = {"model": spec.scene.material.model.value,
                              **{k: getattr(spec.scene.material, k) for k in spec.scene.material.active}}
    d["scene"]["guess"] = {"model": spec.scene.guess.model.value,
                           **{k: getattr(spec.scene.guess, k) for k in spec.scene.guess.active}}
    return d
