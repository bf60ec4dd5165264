"""Command-line entry point: ``mpmfit {simulate,fit,benchmark,gradcheck,render}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .fileio import write_ply
from .render import render_alpha, write_pgm

log = logging.getLogger("mpmfit")


def _load_spec(args) -> harness.ExperimentSpec:
    if args.scene and Path(args.scene).exists():
        spec = harness.load_spec(args.scene)
    else:
        name = args.scene or "elastic-cube-drop"
        if name not in harness.CATALOG:
            raise SystemExit(f"unknown scene {name!r}; use a TOML file or one of {sorted(harness.CATALOG)}")
        spec = harness.ExperimentSpec(harness.CATALOG[name])
    return spec


def cmd_simulate(args) -> int:
    from .mpm import simulate

    spec = _load_spec(args)
    scene = spec.scene.build()
    traj = simulate(scene, timestamps=spec.scene.timestamps)
    out = Path(args.out) / "frames"
    out.mkdir(parents=True, exist_ok=True)
    p = scene.particles
    for t, fr in enumerate(traj.frames):
        write_ply(out / f"frame_{t:03d}.ply", fr.positions, p.radii, p.opacities)
    print(f"wrote {len(traj.frames)} frames ({len(p)} particles, {traj.total_substeps} substeps) to {out}")
    return 0


def cmd_render(args) -> int:
    from .core import ring_cameras
    from .fileio import read_ply

    cols = read_ply(args.ply)
    pos = np.stack([cols["x"], cols["y"], cols["z"]], 1)
    cams = ring_cameras(10, image_size=args.size)
    out = Path(args.out) / "alpha"
    out.mkdir(parents=True, exist_ok=True)
    for c in args.cameras:
        img = render_alpha(pos, cams[c], cols["radius"], cols["opacity"])
        write_pgm(out / f"{Path(args.ply).stem}_c{c:02d}.pgm", img)
    print(f"wrote {len(args.cameras)} alpha maps to {out}")
    return 0


def cmd_fit(args) -> int:
    spec = _load_spec(args)
    spec = replace(spec, cameras=args.cameras, strategies=(args.strategy,), seeds=(args.seed,))
    if args.iterations:
        spec = replace(spec, iterations=tuple(args.iterations))
    res = harness.run_benchmark(spec, args.out)
    _print_rows(res.rows)
    return _strict_status(args, res.rows)


def cmd_benchmark(args) -> int:
    spec = harness.load_spec(args.spec)
    res = harness.run_benchmark(spec, args.out)
    _print_rows(res.rows)
    return _strict_status(args, res.rows)


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r['strategy']:>12} seed={r['seed']} cd={r.get('cd', float('nan')):.4g} "
              f"emd={r.get('emd', float('nan')):.4g} psnr_novel={r.get('psnr_novel', float('nan')):.3g}"
              + (f"  [{r['note']}]" if r.get("note") else ""))


def _strict_status(args, rows) -> int:
    if not getattr(args, "strict", False):
        return 0
    bad = [r for r in rows if r.get("diverged") or not np.isfinite(r.get("cd", np.inf))]
    return 1 if bad else 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_all

    rows, ok = gradcheck_all(seed=args.seed, models=args.models, tol=args.tol)
    print(f"{'model':<14}{'param':<12}{'adjoint':>14}{'fd':>14}{'rel err':>11}")
    for r in rows:
        print(f"{r['model']:<14}{r['param']:<12}{r['adjoint']:>14.6e}{r['fd']:>14.6e}{r['rel_err']:>11.2e}"
              f"{'' if r['ok'] else '  FAIL'}")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpmfit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="forward simulation only")
    p.add_argument("--scene", help="TOML spec file or catalog scene name")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="stage-0 reconstruction plus one strategy")
    p.add_argument("--scene", help="TOML spec file or catalog scene name")
    p.add_argument("--strategy", choices=("sequential", "fulljoint", "progressive"), default="progressive")
    p.add_argument("--cameras", type=int, choices=(3, 10), default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, nargs="+", help="per-stage iteration override")
    p.add_argument("--out", default="out")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("benchmark", help="run every strategy x seed of a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="adjoint vs finite differences for every material model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", nargs="+")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="alpha maps of a PLY particle dump")
    p.add_argument("ply")
    p.add_argument("--cameras", type=int, nargs="+", default=list(range(10)))
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
