import math
from dataclasses import replace

import numpy as np
import pytest

from mpmfit.core import MaterialParams
from mpmfit.fileio import loads_toml
from mpmfit.harness import (CATALOG, PSNR_CAP, ExperimentSpec, SpecError, compute_metrics, generate_ground_truth,
                            load_spec, param_mae, psnr, report_rows, run_benchmark, spec_from_dict, spec_to_dict)
from mpmfit.optengine import FitParams, FitResult

from conftest import TINY_TOML


def _tiny(**kw):
    spec = spec_from_dict(loads_toml(TINY_TOML))
    return replace(spec, **kw)


def test_ground_truth_on_disk(tmp_path):
    spec = replace(_tiny(), scene=replace(_tiny().scene, n_frames=20), train_frames=14)
    gt = generate_ground_truth(spec, tmp_path)
    assert len(gt.alphas) == 200 and len(gt.positions) == 20
    assert len(list((tmp_path / "alpha").glob("*.pgm"))) == 200
    assert len(list((tmp_path / "frames").glob("*.ply"))) == 20


def test_sparse_camera_split():
    spec = _tiny(cameras=3)
    assert spec.camera_indices == (1, 5, 9)
    assert set(spec.novel_indices).isdisjoint(spec.camera_indices)
    assert len(spec.novel_indices) + len(spec.camera_indices) == 10
    gt = generate_ground_truth(spec)
    obs = gt.observations(spec.camera_indices, spec.train)
    assert {c for _, c in obs} == {1, 5, 9}
    assert max(spec.train) < min(spec.test)
    with pytest.raises(SpecError):
        _tiny(cameras=4)


def test_static_scene_frames_identical():
    sc = replace(_tiny().scene, v0=(0.0, 0.0, 0.0), gravity=(0.0, 0.0, 0.0))
    gt = generate_ground_truth(_tiny(scene=sc))
    for x in gt.positions[1:]:
        assert np.array_equal(x, gt.positions[0])


def test_unstable_truth_is_a_spec_error():
    sc = replace(_tiny().scene, v0=(0.0, -400.0, 0.0), boundary="none")
    with pytest.raises(SpecError):
        generate_ground_truth(_tiny(scene=sc))


def test_true_parameters_are_self_consistent():
    spec = _tiny(cameras=3)
    gt = generate_ground_truth(spec)
    p = gt.scene.particles
    prm = FitParams.from_physical(spec.scene.v0, spec.scene.material, p.positions, p.radii, p.opacities)
    m = compute_metrics(FitResult("progressive", prm, [], 0.0), gt, spec, gt.scene)
    assert m["cd"] == 0.0 and m["emd"] == 0.0
    assert m["psnr_seen"] == PSNR_CAP and m["psnr_novel"] == PSNR_CAP
    assert m["ssim_seen"] == pytest.approx(1.0)
    assert m["mae_v0"] == pytest.approx(0.0, abs=1e-15)
    assert m["mae_log10_E"] == pytest.approx(0.0, abs=1e-12) and m["mae_nu"] == pytest.approx(0.0, abs=1e-12)


def test_psnr_and_mae_closed_forms():
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr(np.zeros(3), np.zeros(3)) == PSNR_CAP
    mae = param_mae(MaterialParams("elastic", E=1.1e5, nu=0.3), MaterialParams("elastic", E=1e5, nu=0.3))
    assert mae["mae_log10_E"] == pytest.approx(0.0414, abs=1e-4)
    assert mae["mae_nu"] == 0.0


def test_report_mean_std_rows():
    rows = [{"strategy": "progressive", "seed": s, "cd": float(s)} for s in (0, 1, 2)]
    lines = report_rows(rows).splitlines()
    assert lines[0] == "strategy,seed,cd"
    assert lines[-2] == "progressive,mean,1.0"
    assert lines[-1].startswith("progressive,std,0.816")


def test_benchmark_reproducible(tmp_path):
    spec = _tiny(cameras=3, seeds=(0, 1))
    a = run_benchmark(spec, tmp_path / "a")
    b = run_benchmark(spec, tmp_path / "b")
    assert len(a.rows) == 2
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    for sub in ("summary.json", "report.dat", "traces/progressive_seed0.csv"):
        assert (tmp_path / "a" / sub).exists()
    # the shared ground truth is written once and is identical between runs
    for name in ("frames/frame_005.ply", "alpha/t005_c09.pgm"):
        assert (tmp_path / "a/truth" / name).read_bytes() == (tmp_path / "b/truth" / name).read_bytes()


def test_failed_run_is_recorded(tmp_path):
    spec = _tiny(cameras=3, strategies=("progressive", "bogus"))
    res = run_benchmark(spec)
    assert [r["strategy"] for r in res.rows] == ["progressive", "bogus"]
    assert res.rows[1]["diverged"] and "bogus" in res.rows[1]["note"]
    assert math.isfinite(res.rows[0]["cd"])


def test_spec_round_trip(tiny_toml):
    spec = load_spec(tiny_toml)
    assert spec.scene.grid_resolution == 16 and spec.iterations == (2, 2, 2)
    assert spec.stage0.control_points == 8
    assert spec_from_dict(spec_to_dict(spec)) == spec
    assert spec_from_dict(spec_to_dict(ExperimentSpec(CATALOG["plasticine-cube-smash"]))).scene.material.tau_y == 3e3
