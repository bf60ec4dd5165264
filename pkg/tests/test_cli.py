import json

from mpmfit.cli import main
from mpmfit.fileio import read_ply_positions


def test_simulate_and_render(tmp_path, tiny_toml, capsys):
    assert main(["simulate", "--scene", str(tiny_toml), "--out", str(tmp_path)]) == 0
    frames = sorted((tmp_path / "frames").glob("*.ply"))
    assert len(frames) == 6 and read_ply_positions(frames[0]).shape[1] == 3
    assert main(["render", str(frames[0]), "--cameras", "0", "3", "--size", "24", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "alpha").glob("*.pgm"))) == 2
    assert "wrote" in capsys.readouterr().out


def test_fit_writes_report(tmp_path, tiny_toml):
    rc = main(["fit", "--scene", str(tiny_toml), "--cameras", "3", "--strategy", "fulljoint",
               "--iterations", "3", "--out", str(tmp_path), "--strict"])
    assert rc == 0
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[1].startswith("fulljoint,0,3,")
    assert json.loads((tmp_path / "summary.json").read_text())["cameras"] == 3


def test_benchmark_subcommand(tmp_path, tiny_toml):
    spec = tmp_path / "bench.toml"
    spec.write_text(tiny_toml.read_text().replace("[experiment]", '[experiment]\ncameras = 3\n'
                                                  'strategies = ["sequential", "progressive"]'))
    assert main(["benchmark", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    assert len((tmp_path / "b" / "report.csv").read_text().splitlines()) == 1 + 2 + 4


def test_gradcheck_subcommand(tmp_path, capsys):
    rc = main(["gradcheck", "--models", "elastic", "--json", str(tmp_path / "g.json")])
    out = capsys.readouterr().out
    assert rc == 0 and "elastic" in out
    rows = json.loads((tmp_path / "g.json").read_text())
    assert {r["param"] for r in rows} >= {"raw_E", "raw_nu", "v0_x"}
