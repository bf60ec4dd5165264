import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpmfit.core import MaterialParams, Scene, ring_cameras, sample_shape
from mpmfit.mpm import simulate
from mpmfit.optengine import (AdamState, AllFrames, FirstK, FitParams, FitProblem, NonFiniteGradientError,
                              StageConfig, adam_step, cosine_lr, fulljoint_plan, make_plan, progressive_plan,
                              run_stage, run_strategy, sequential_plan, write_trace)
from mpmfit.render import render_alpha


def test_cosine_examples():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == pytest.approx(0.025)
    assert cosine_lr(50, 100, 0.1, floor_fraction=0.0) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)


@given(st.integers(1, 500), st.floats(0.0, 1.0))
def test_cosine_monotone(total, floor):
    lrs = [cosine_lr(i, total, 1.0, floor) for i in range(total + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step():
    th, stt = adam_step(np.array([0.0]), AdamState.zeros_like(np.zeros(1)), np.array([1.0]), 0.1)
    assert th[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)
    assert str(-th[0]).startswith("0.0999999")
    assert stt.t == 1


def test_adam_zero_gradient_and_asymptote():
    s = AdamState(np.array([0.5]), np.array([0.25]), 3)
    th, s2 = adam_step(np.array([2.0]), s, np.array([0.0]), 0.1)
    assert s2.m[0] == pytest.approx(0.45) and s2.v[0] == pytest.approx(0.25 * 0.999)
    x, s = np.array([0.0]), AdamState.zeros_like(np.zeros(1))
    for _ in range(5000):
        prev = x.copy()
        x, s = adam_step(x, s, np.array([3.0]), 0.01)
    assert prev[0] - x[0] == pytest.approx(0.01, rel=1e-6)


def test_adam_errors():
    s = AdamState.zeros_like(np.zeros(2))
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), s, np.zeros(3), 0.1)
    with pytest.raises(NonFiniteGradientError):
        adam_step(np.zeros(2), s, np.array([1.0, np.nan]), 0.1)


def test_plans():
    p = progressive_plan()
    assert [sorted(s.active_params) for s in p.stages] == [
        ["v0"], ["material", "v0"], ["appearance", "material", "v0", "x0"]]
    assert [s.iterations for s in p.stages] == [100, 100, 100]
    assert p.stages[0].frames == FirstK(3)
    assert progressive_plan("nonnewtonian").stages[1].iterations == 350
    for name in ("sequential", "fulljoint"):
        assert make_plan(name).total_iterations == p.total_iterations
    assert [sorted(s.active_params) for s in sequential_plan().stages] == [["v0"], ["material"]]
    assert len(fulljoint_plan().stages) == 1
    with pytest.raises(ValueError):
        make_plan("nope")
    with pytest.raises(ValueError):
        StageConfig("s", {"v0"}, AllFrames(), 0)
    with pytest.raises(ValueError):
        StageConfig("s", {"mass"}, AllFrames(), 1)
    with pytest.raises(ValueError):
        FirstK(5).select([0, 1, 2])


def test_fit_params_round_trip():
    mat = MaterialParams("elastic", E=2e5, nu=0.25)
    r = np.array([0.01, 0.02])
    o = np.array([0.3, 0.9])
    p = FitParams.from_physical([1, 2, 3], mat, np.zeros((2, 3)), r, o)
    assert np.allclose(p.radii, r, rtol=1e-14) and np.allclose(p.opacities, o, rtol=1e-12)
    assert p.material_params.E == pytest.approx(2e5, rel=1e-12)


def _ballistic_problem(cams=3, size=48, true_v0=(0.4, 0.3, -0.2)):
    ps = sample_shape("cube", (0.5, 0.5, 0.5), 0.12, 1, 32, seed=0)
    mat = MaterialParams("elastic")
    scene = Scene(ps, np.array(true_v0), mat, boundary="none", side_walls=False)
    ts = np.arange(6) / 60
    traj = simulate(scene, timestamps=ts)
    cameras = ring_cameras(cams, image_size=size)
    obs = {(t, c): render_alpha(traj.frames[t].positions, cameras[c], ps.radii, ps.opacities).values
           for t in range(6) for c in range(cams)}
    targets = {t: traj.frames[t].positions for t in range(6)}
    prob = FitProblem(scene, ts, tuple(range(6)), obs, cameras, targets, x0_reference=ps.positions)
    init = FitParams.from_physical(np.array(true_v0) + 0.5, mat, ps.positions, ps.radii, ps.opacities)
    return prob, init, np.array(true_v0)


def test_stage1_recovers_ballistic_velocity():
    prob, init, v_true = _ballistic_problem()
    stage = StageConfig("stage1", {"v0"}, FirstK(3), 100)
    res, _ = run_stage(prob, stage, init)
    assert np.abs(res.best.v0 - v_true).max() <= 1e-3
    # masking: everything outside the stage is bitwise untouched
    assert np.array_equal(res.best.material, init.material)
    assert np.array_equal(res.best.x0, init.x0)
    assert np.array_equal(res.best.appearance, init.appearance)
    losses = [r["total"] for r in res.trace]
    assert res.best_loss == min(losses)


def test_zero_lr_leaves_parameters():
    prob, init, _ = _ballistic_problem()
    stage = StageConfig("s", {"v0", "material"}, AllFrames(), 1, {"v0": 0.0, "material": 0.0})
    res, _ = run_stage(prob, stage, init)
    assert np.array_equal(res.best.v0, init.v0) and np.array_equal(res.best.material, init.material)
    assert res.trace[0]["total"] == res.trace[1]["total"]


def test_run_strategy_and_trace(tmp_path):
    prob, init, _ = _ballistic_problem()
    plan = progressive_plan(iterations=(3, 2, 2))
    out = run_strategy(prob, plan, init)
    assert [s.name for s in out.stages] == ["stage1", "stage2", "stage3"]
    assert len(out.trace) == 3 + 3 + 4 and len(out.x0_error_trace) == len(out.trace)
    # each stage starts from the previous stage's best iterate
    assert out.stages[1].trace[0]["v0_x"] == pytest.approx(out.stages[0].best.v0[0])
    assert not math.isnan(out.x0_error_trace[0])
    write_trace(tmp_path / "t.csv", out)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == len(out.trace) and float(rows[0]["total"]) == out.trace[0]["total"]
    again = run_strategy(prob, plan, init)
    assert np.array_equal(again.params.x0, out.params.x0) and np.array_equal(again.params.v0, out.params.v0)
