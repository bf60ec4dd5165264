"""Domain types, shape sampling and parameter transforms shared by every module."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

LOG10 = math.log(10.0)
NU_MAX = 0.45
THETA_MAX = 45.0
LOG_RAW_LIMIT = 300.0


class ShapeError(ValueError):
    """Raised when a sampled shape does not fit inside the unit domain."""


class IncompressibilityError(ValueError):
    """Raised for Poisson ratios at or above 0.5."""


class MaterialModel(str, enum.Enum):
    ELASTIC = "elastic"
    NEWTONIAN = "newtonian"
    NONNEWTONIAN = "nonnewtonian"
    PLASTICINE = "plasticine"
    SAND = "sand"


class Shape(str, enum.Enum):
    CUBE = "cube"
    SPHERE = "sphere"
    TORUS = "torus"


class Boundary(str, enum.Enum):
    STICKY = "sticky"
    SEPARATING = "separating"
    NONE = "none"


# Parameters each model actually uses; the rest of MaterialParams is inert for it.
ACTIVE_FIELDS: dict[MaterialModel, tuple[str, ...]] = {
    MaterialModel.ELASTIC: ("E", "nu"),
    MaterialModel.NEWTONIAN: ("mu_visc", "kappa"),
    MaterialModel.NONNEWTONIAN: ("mu_visc", "kappa", "tau_y", "eta"),
    MaterialModel.PLASTICINE: ("E", "nu", "tau_y"),
    MaterialModel.SAND: ("theta_fric",),
}

LOG_FIELDS = frozenset({"E", "mu_visc", "kappa", "tau_y", "eta"})
SIGMOID_BOUNDS = {"nu": NU_MAX, "theta_fric": THETA_MAX}


@dataclass(frozen=True)
class MaterialParams:
    """Material description; only ``ACTIVE_FIELDS[model]`` are meaningful.

    Sand keeps E and nu as fixed (non-optimised) elastic constants.
    """

    model: MaterialModel
    E: float = 1e5
    nu: float = 0.3
    mu_visc: float = 1.0
    kappa: float = 1e5
    tau_y: float = 1e3
    eta: float = 1.0
    theta_fric: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "model", MaterialModel(self.model))
        for name in self.active:
            _check_range(name, getattr(self, name))
        if self.model is MaterialModel.SAND:
            _check_range("E", self.E)
            _check_range("nu", self.nu)

    @property
    def active(self) -> tuple[str, ...]:
        return ACTIVE_FIELDS[self.model]

    def active_values(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in self.active], dtype=float)

    def with_values(self, **kw) -> "MaterialParams":
        return replace(self, **kw)


def _check_range(name: str, value: float) -> None:
    ok = {
        "E": value > 0,
        "nu": 0 < value < NU_MAX,
        "mu_visc": value > 0,
        "kappa": value > 0,
        "tau_y": value >= 0,
        "eta": value > 0,
        "theta_fric": 0 < value < THETA_MAX,
    }[name]
    if not (ok and math.isfinite(value)):
        raise ValueError(f"material parameter {name}={value!r} out of range")


def lame_from_E_nu(E: float, nu: float) -> tuple[float, float]:
    """Lamé constants (mu, lambda) from Young's modulus and Poisson ratio."""
    if nu >= 0.5:
        raise IncompressibilityError(f"nu={nu} >= 0.5 is incompressible")
    if E <= 0:
        raise ValueError(f"E must be positive, got {E}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def lame_jacobian(E: float, nu: float) -> np.ndarray:
    """d(mu, lambda)/d(E, nu) as a 2x2 array."""
    d = (1.0 + nu) * (1.0 - 2.0 * nu)
    return np.array([
        [1.0 / (2.0 * (1.0 + nu)), -E / (2.0 * (1.0 + nu) ** 2)],
        [nu / d, E * (1.0 + 2.0 * nu * nu) / d ** 2],
    ])


def _sigmoid(r: float) -> float:
    if r >= 0:
        return 1.0 / (1.0 + math.exp(-r))
    e = math.exp(r)
    return e / (1.0 + e)


def _raw_to_value(name: str, r: float) -> float:
    if name in LOG_FIELDS:
        return 10.0 ** min(max(r, -LOG_RAW_LIMIT), LOG_RAW_LIMIT)
    bound = SIGMOID_BOUNDS[name]
    v = bound * _sigmoid(r)
    # saturation must stay strictly inside the open interval
    return min(max(v, 5e-324), math.nextafter(bound, 0.0))


def _value_to_raw(name: str, v: float) -> float:
    if name in LOG_FIELDS:
        return math.log10(v)
    s = v / SIGMOID_BOUNDS[name]
    return math.log(s) - math.log1p(-s)


def params_to_raw(params: MaterialParams) -> np.ndarray:
    """Unconstrained optimisation coordinates for the active fields."""
    return np.array([_value_to_raw(k, getattr(params, k)) for k in params.active])


def raw_to_params(raw: Sequence[float], template: MaterialParams) -> MaterialParams:
    raw = np.asarray(raw, dtype=float).ravel()
    if raw.size != len(template.active):
        raise ValueError(
            f"{template.model.value} expects {len(template.active)} raw values, got {raw.size}")
    vals = {k: _raw_to_value(k, float(r)) for k, r in zip(template.active, raw)}
    return replace(template, **vals)


def raw_jacobian(raw: Sequence[float], template: MaterialParams) -> np.ndarray:
    """Diagonal of d(value)/d(raw) for each active field."""
    out = []
    for k, r in zip(template.active, np.asarray(raw, dtype=float)):
        if k in LOG_FIELDS:
            out.append(0.0 if abs(r) >= LOG_RAW_LIMIT else 10.0 ** r * LOG10)
        else:
            s = _sigmoid(float(r))
            out.append(SIGMOID_BOUNDS[k] * s * (1.0 - s))
    return np.array(out)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticleSet:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    volumes: np.ndarray
    deformation_gradients: np.ndarray
    affine_velocities: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray

    def __post_init__(self):
        for name in ("positions", "velocities", "masses", "volumes",
                     "deformation_gradients", "affine_velocities", "radii", "opacities"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError("positions/velocities must be (N, 3)")
        if self.deformation_gradients.shape != (n, 3, 3) or self.affine_velocities.shape != (n, 3, 3):
            raise ValueError("deformation/affine matrices must be (N, 3, 3)")
        for name in ("masses", "volumes", "radii", "opacities"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must be (N,)")
        if np.any(self.masses <= 0) or np.any(self.volumes <= 0) or np.any(self.radii <= 0):
            raise ValueError("masses, volumes and radii must be positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def at_rest(cls, positions, masses, volumes, radii, opacities, velocities=None) -> "ParticleSet":
        n = len(positions)
        return cls(
            positions=positions,
            velocities=np.zeros((n, 3)) if velocities is None else velocities,
            masses=masses,
            volumes=volumes,
            deformation_gradients=np.broadcast_to(np.eye(3), (n, 3, 3)),
            affine_velocities=np.zeros((n, 3, 3)),
            radii=radii,
            opacities=opacities,
        )

    def replace(self, **kw) -> "ParticleSet":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (OpenCV axes)."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        R = _frozen(self.rotation)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))
        if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
            raise ValueError("camera rotation must be orthonormal")
        if not self.focal > 0:
            raise ValueError("focal length must be positive")

    @classmethod
    def look_at(cls, eye, target, focal: float, width: int, height: int, up=(0.0, 1.0, 0.0)) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye, focal, (width / 2.0, height / 2.0), width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N, 2) and depths (N,) of world points."""
        pc = self.to_camera(np.asarray(points, dtype=float))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.focal * pc[:, :2] / z[:, None] + np.asarray(self.principal_point)
        return uv, z


def ring_cameras(count: int = 10, radius: float = 1.5, elevation_deg: float = 15.0,
                 target=(0.5, 0.5, 0.5), image_size: int = 128, fov_deg: float = 40.0) -> list[Camera]:
    """Turntable ring of look-at cameras around ``target``."""
    el = math.radians(elevation_deg)
    focal = (image_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    target = np.asarray(target, dtype=float)
    cams = []
    for i in range(count):
        phi = 2.0 * math.pi * i / count
        eye = target + radius * np.array([math.cos(el) * math.sin(phi), math.sin(el),
                                          math.cos(el) * math.cos(phi)])
        cams.append(Camera.look_at(eye, target, focal, image_size, image_size))
    return cams


@dataclass(frozen=True)
class LossWeights:
    lambda_img: Optional[float] = None  # None -> 1/|C|
    lambda_cd: float = 1.0
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_alpha: float = 1.0

    def __post_init__(self):
        for k in ("lambda_cd", "lambda_l1", "lambda_ssim", "lambda_alpha"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.lambda_img is not None and self.lambda_img < 0:
            raise ValueError("lambda_img must be nonnegative")

    def img_weight(self, n_cameras: int) -> float:
        return 1.0 / n_cameras if self.lambda_img is None else self.lambda_img


@dataclass(frozen=True, eq=False)
class Scene:
    particles: ParticleSet
    v0: np.ndarray
    material: MaterialParams
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.8, 0.0]))
    grid_resolution: int = 32
    dt: float = 1e-3
    ground_friction: float = 0.5
    boundary: Boundary = Boundary.SEPARATING
    density: float = 1000.0
    cfl: float = 0.3
    floor_cells: int = 3
    side_walls: bool = True  # frictionless containment on the other five faces
    velocity_allowance: float = 3.0
    max_substeps_per_frame: int = 200

    def __post_init__(self):
        object.__setattr__(self, "v0", _frozen(self.v0))
        object.__setattr__(self, "gravity", _frozen(self.gravity))
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if self.ground_friction < 0:
            raise ValueError("ground_friction must be >= 0")
        if self.grid_resolution < 4:
            raise ValueError("grid_resolution must be >= 4")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_resolution

    def replace(self, **kw) -> "Scene":
        return replace(self, **kw)


def _rotation_from_euler(angles_deg) -> np.ndarray:
    ax, ay, az = (math.radians(a) for a in angles_deg)
    cx, sx, cy, sy, cz, sz = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay), math.cos(az), math.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def shape_volume(shape: Shape, scale: float, minor_ratio: float = 1.0 / 3.0) -> float:
    shape = Shape(shape)
    if shape is Shape.CUBE:
        return scale ** 3
    if shape is Shape.SPHERE:
        return 4.0 / 3.0 * math.pi * scale ** 3
    minor = scale * minor_ratio
    return 2.0 * math.pi ** 2 * scale * minor ** 2


def inside_shape(shape: Shape, local: np.ndarray, scale: float, minor_ratio: float = 1.0 / 3.0) -> np.ndarray:
    """Membership test in the shape's local frame (centered at the origin)."""
    shape = Shape(shape)
    if shape is Shape.CUBE:
        return np.all(np.abs(local) <= scale / 2.0, axis=1)
    if shape is Shape.SPHERE:
        return np.einsum("ij,ij->i", local, local) <= scale * scale
    ring = np.hypot(local[:, 0], local[:, 2]) - scale
    return ring * ring + local[:, 1] ** 2 <= (scale * minor_ratio) ** 2


def _extent(shape: Shape, scale: float, minor_ratio: float) -> float:
    if shape is Shape.CUBE:
        return scale / 2.0 * math.sqrt(3.0)
    if shape is Shape.SPHERE:
        return scale
    return scale * (1.0 + minor_ratio)


def sample_shape(shape, center, scale: float, particles_per_cell: int = 8, grid_resolution: int = 32,
                 *, seed: int = 0, density: float = 1000.0, rotation_deg=(0.0, 0.0, 0.0),
                 minor_ratio: float = 1.0 / 3.0, radius_factor: float = 0.75,
                 opacity: float = 0.9) -> ParticleSet:
    """Jittered stratified sampling of a cube (side ``scale``), sphere (radius
    ``scale``) or torus (major radius ``scale``, minor ``scale*minor_ratio``)."""
    shape = Shape(shape)
    center = np.asarray(center, dtype=float)
    if scale <= 0:
        raise ShapeError("scale must be positive")
    R = _rotation_from_euler(rotation_deg)
    # conservative bounding box of the rotated shape, then an exact corner check below
    ext = _extent(shape, scale, minor_ratio)
    lo, hi = center - ext, center + ext
    if shape is Shape.CUBE:
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * scale / 2
        pts = corners @ R.T + center
        lo, hi = pts.min(0), pts.max(0)
    elif shape is Shape.TORUS:
        # axis-aligned bound of a rotated torus: ring radius along in-plane directions
        axis = R[:, 1]
        half = scale * np.sqrt(np.clip(1.0 - axis ** 2, 0.0, None)) + scale * minor_ratio
        lo, hi = center - half, center + half
    if np.any(lo <= 0.0) or np.any(hi >= 1.0):
        raise ShapeError(f"{shape.value} at {center.tolist()} with scale {scale} escapes the unit domain "
                         f"(bounds {lo.round(4).tolist()} .. {hi.round(4).tolist()})")

    rng = np.random.default_rng(seed)
    h = 1.0 / grid_resolution
    k = round(particles_per_cell ** (1.0 / 3.0))
    c0 = np.floor(lo / h).astype(int)
    c1 = np.ceil(hi / h).astype(int)
    if k ** 3 == particles_per_cell:
        s = h / k
        i0, i1 = c0 * k, c1 * k
        grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(i0, i1)], indexing="ij"), -1)
        cells = grid.reshape(-1, 3).astype(float)
        pts = (cells + rng.random(cells.shape)) * s
    else:
        grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(c0, c1)], indexing="ij"), -1)
        cells = np.repeat(grid.reshape(-1, 3).astype(float), particles_per_cell, axis=0)
        pts = (cells + rng.random(cells.shape)) * h
        s = h / particles_per_cell ** (1.0 / 3.0)
    local = (pts - center) @ R
    pts = pts[inside_shape(shape, local, scale, minor_ratio)]
    if len(pts) == 0:
        raise ShapeError("shape too small for the sampling resolution")
    n = len(pts)
    vol = shape_volume(shape, scale, minor_ratio) / n
    return ParticleSet.at_rest(
        positions=pts,
        masses=np.full(n, density * vol),
        volumes=np.full(n, vol),
        radii=np.full(n, radius_factor * s),
        opacities=np.full(n, opacity),
    )
