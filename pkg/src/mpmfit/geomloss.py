"""Point-set losses and metrics: Chamfer distance, earth mover's distance, visibility masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from . import kernels as K
from .core import Camera

log = logging.getLogger(__name__)

CD_REPORT_SCALE = 1e3
EMD_EXACT_MAX = 512
SINKHORN_ITERS = 200
SINKHORN_EPS_FRACTION = 0.01


class ContractError(ValueError):
    """Inputs violate an operation's preconditions."""


def _points(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float).reshape(-1, 3)
    if len(a) == 0:
        raise ContractError(f"point set {name} is empty")
    return a


def chamfer(a, b) -> float:
    """Mean squared nearest distance a->b plus b->a."""
    a, b = _points(a, "a"), _points(b, "b")
    _, dab = K.nearest(a, b)
    _, dba = K.nearest(b, a)
    return float(dab.mean() + dba.mean())


def chamfer_grad(a, b) -> tuple[float, np.ndarray]:
    """Chamfer value and its gradient wrt ``a``. Ties go to the lowest index."""
    a, b = _points(a, "a"), _points(b, "b")
    ia, dab = K.nearest(a, b)
    ib, dba = K.nearest(b, a)
    g = 2.0 * (a - b[ia]) / len(a)
    back = 2.0 * (a[ib] - b) / len(b)
    for d in range(3):
        g[:, d] += np.bincount(ib, weights=back[:, d], minlength=len(a))
    return float(dab.mean() + dba.mean()), g


def chamfer_metric(a, b) -> float:
    """Chamfer distance in reporting units (x1e3)."""
    return CD_REPORT_SCALE * chamfer(a, b)


def nearest_tie_gap(a, b) -> np.ndarray:
    """Per-point gap between the first and second nearest squared distances (a->b)."""
    a, b = _points(a, "a"), _points(b, "b")
    if len(b) < 2:
        return np.full(len(a), np.inf)
    d, _ = cKDTree(b).query(a, k=2)
    return d[:, 1] ** 2 - d[:, 0] ** 2


@dataclass(frozen=True)
class EMDResult:
    value: float
    mode: str  # "exact" or "sinkhorn"
    n: int

    def __float__(self):
        return self.value


def _sqdist(a, b):
    return np.einsum("ijk,ijk->ij", a[:, None, :] - b[None, :, :], a[:, None, :] - b[None, :, :])


def _sinkhorn_cost(a, b, eps, iters):
    """Transport cost <P, C> of the entropic plan between uniform measures (log domain)."""
    C = _sqdist(a, b)
    la = np.full(len(a), -np.log(len(a)))
    lb = np.full(len(b), -np.log(len(b)))
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    for _ in range(iters):
        f = -eps * logsumexp((g[None, :] - C) / eps + lb[None, :], axis=1)
        g = -eps * logsumexp((f[:, None] - C) / eps + la[:, None], axis=0)
    P = np.exp((f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :])
    return float(np.sum(P * C))


def sinkhorn_emd(a, b, eps=None, iters: int = SINKHORN_ITERS) -> float:
    """Debiased entropic estimate of the squared-distance transport cost.

    ``eps`` defaults to 1% of the joint bounding-box diagonal. Subtracting the
    self-transport terms removes most of the entropic blur.
    """
    a, b = _points(a, "a"), _points(b, "b")
    if eps is None:
        both = np.vstack([a, b])
        eps = SINKHORN_EPS_FRACTION * float(np.linalg.norm(both.max(0) - both.min(0)))
    if eps <= 0:
        return 0.0
    v = _sinkhorn_cost(a, b, eps, iters) - 0.5 * _sinkhorn_cost(a, a, eps, iters) - 0.5 * _sinkhorn_cost(b, b, eps, iters)
    return max(v, 0.0)


def emd(a, b, mode: str = "auto") -> EMDResult:
    """Earth mover's distance on squared distances, normalised by N.

    ``mode``: "exact" (optimal assignment), "sinkhorn", or "auto" (exact up to
    512 points).
    """
    a, b = _points(a, "a"), _points(b, "b")
    if mode == "auto":
        mode = "exact" if max(len(a), len(b)) <= EMD_EXACT_MAX else "sinkhorn"
    if mode == "exact":
        if len(a) != len(b):
            raise ContractError(f"exact EMD needs equal sizes, got {len(a)} and {len(b)}")
        C = _sqdist(a, b)
        r, c = linear_sum_assignment(C)
        return EMDResult(float(C[r, c].sum() / len(a)), "exact", len(a))
    if mode == "sinkhorn":
        return EMDResult(sinkhorn_emd(a, b), "sinkhorn", max(len(a), len(b)))
    raise ValueError(f"unknown EMD mode {mode!r}")


def common_subsample(a, b, n_max: int = EMD_EXACT_MAX, seed: int = 0):
    """Deterministic random subsets of equal size (at most ``n_max``) of two sets."""
    a, b = _points(a, "a"), _points(b, "b")
    n = min(len(a), len(b), n_max)
    rng = np.random.default_rng(seed)
    ia = np.sort(rng.permutation(len(a))[:n])
    ib = np.sort(rng.permutation(len(b))[:n])
    return a[ia], b[ib]


def visibility_mask(points, camera: Camera, occlusion_radius: float) -> np.ndarray:
    """True where no other point projects within ``occlusion_radius`` pixels at a
    strictly smaller depth. Points behind the camera are never visible."""
    if occlusion_radius <= 0:
        raise ContractError("occlusion_radius must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    mask = np.zeros(len(pts), bool)
    if len(pts) == 0:
        return mask
    uv, z = camera.project(pts)
    front = z > 0
    idx = np.flatnonzero(front)
    if len(idx) == 0:
        return mask
    uvf, zf = uv[idx], z[idx]
    tree = cKDTree(uvf)
    # strict inequality on the pixel distance
    r = np.nextafter(occlusion_radius, 0.0)
    for k, nb in enumerate(tree.query_ball_point(uvf, r)):
        mask[idx[k]] = not np.any(zf[nb] < zf[k])
    return mask


def visible_subset(points, camera: Camera, occlusion_radius: float) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts[visibility_mask(pts, camera, occlusion_radius)]
