"""Time the compiled kernels against the numpy fallback on a 4k-particle scene.

    python3 benchmarks/bench_kernels.py [--particles N] [--repeat R]
"""
import argparse
import timeit

import numpy as np

from mpmfit.core import ring_cameras
from mpmfit.kernels import _pykernels
from mpmfit.render import ALPHA_MAX, CUTOFF_SIGMAS

try:
    from mpmfit.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(n_particles: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    n = 32
    x = 0.3 + 0.4 * rng.random((n_particles, 3))
    mv = rng.standard_normal((n_particles, 3))
    A = rng.standard_normal((n_particles, 3, 3))
    m = np.full(n_particles, 1e-3)
    grid_v = rng.standard_normal((n, n, n, 3))
    v_bar = rng.standard_normal((n_particles, 3))
    C_bar = rng.standard_normal((n_particles, 3, 3))
    cam = ring_cameras(1, image_size=128)[0]
    pc = x @ cam.rotation.T + cam.translation
    u = cam.focal * pc[:, 0] / pc[:, 2] + cam.principal_point[0]
    v = cam.focal * pc[:, 1] / pc[:, 2] + cam.principal_point[1]
    r = cam.focal * 0.01 / pc[:, 2]
    opac = np.full(n_particles, 0.9)
    ra = (u, v, r, opac, 128, 128, CUTOFF_SIGMAS, ALPHA_MAX)
    return {
        "p2g": lambda k: k.p2g(x, mv, A, m, float(n), n),
        "g2p": lambda k: k.g2p(x, grid_v, float(n), n),
        "g2p_backward": lambda k: k.g2p_backward(x, grid_v, v_bar, C_bar, float(n), n),
        "render_forward": lambda k: k.render_forward(*ra),
        "nearest": lambda k: k.nearest(x[: n_particles // 2], x[n_particles // 2:]),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--particles", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"{'kernel':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, call in cases(args.particles).items():
        t_py = min(timeit.repeat(lambda: call(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<16}{t_py:>10.2f}{'-':>11}{'-':>9}")
            continue
        t_c = min(timeit.repeat(lambda: call(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_py:>10.2f}{t_c:>11.2f}{t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
