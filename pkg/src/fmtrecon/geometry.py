"""Cylindrical phantoms with tubular fluorescent targets on a regular voxel grid.

Coordinates are in cm. The phantom cylinder is centred on the origin with its
axis along z, so it spans ``[-height/2, height/2]`` in z. Volumes are stored as
arrays of shape ``(nz, ny, nx)``, which makes x the fastest-varying index when
flattened in C order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class GeometryError(ValueError):
    """Grid or phantom geometry is inconsistent."""


class OverlapError(GeometryError):
    """Two targets intersect."""


class SamplingError(RuntimeError):
    """Rejection sampling ran out of attempts."""


CONTAINMENT_MARGIN = 0.05


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 4:
            raise GeometryError(f"grid needs at least 4 voxels per axis, got {self.shape}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise GeometryError("voxel pitch must be positive")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def enclosing(cls, nx: int, ny: int, nz: int, radius: float = 1.5, height: float = 1.5) -> "GridSpec":
        """Grid whose box is exactly the bounding box of a centred cylinder."""
        return cls(nx, ny, nz, 2 * radius / nx, 2 * radius / ny, height / nz,
                   (-radius, -radius, -height / 2))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.nx * self.dx, self.ny * self.dy, self.nz * self.dz)

    @property
    def diameter(self) -> float:
        """Length of the box diagonal; upper bound on any in-domain distance."""
        return float(np.linalg.norm(self.extent))

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-centre coordinates along x, y and z."""
        ox, oy, oz = self.origin
        return (ox + (np.arange(self.nx) + 0.5) * self.dx,
                oy + (np.arange(self.ny) + 0.5) * self.dy,
                oz + (np.arange(self.nz) + 0.5) * self.dz)

    def centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcast voxel-centre coordinates, each of shape (nz, ny, nx)."""
        x, y, z = self.axes()
        zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
        return xx, yy, zz

    def contains_cylinder(self, radius: float, height: float, tol: float = 1e-9) -> bool:
        ox, oy, oz = self.origin
        ex, ey, ez = self.extent
        return (ox <= -radius + tol and ox + ex >= radius - tol
                and oy <= -radius + tol and oy + ey >= radius - tol
                and oz <= -height / 2 + tol and oz + ez >= height / 2 - tol)

    def cylinder_mask(self, radius: float, height: float) -> np.ndarray:
        xx, yy, zz = self.centers()
        return (xx**2 + yy**2 <= radius**2) & (np.abs(zz) <= height / 2)

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "nz": self.nz,
                "dx": self.dx, "dy": self.dy, "dz": self.dz, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["nx"]), int(d["ny"]), int(d["nz"]), float(d["dx"]), float(d["dy"]),
                   float(d["dz"]), tuple(d["origin"]))


@dataclass(frozen=True)
class TargetSpec:
    center: tuple[float, float, float]
    radius: float
    height: float
    yield_: float = 1.0

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0 or self.yield_ <= 0:
            raise GeometryError(f"target radius, height and yield must be positive: {self}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius,
                "height": self.height, "yield": self.yield_}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSpec":
        return cls(tuple(d["center"]), float(d["radius"]), float(d["height"]), float(d["yield"]))


@dataclass(frozen=True)
class PhantomSpec:
    cyl_radius: float = 1.5
    cyl_height: float = 1.5
    targets: tuple[TargetSpec, ...] = ()
    background_yield: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))

    def validate(self, margin: float = CONTAINMENT_MARGIN) -> None:
        if self.cyl_radius <= 0 or self.cyl_height <= 0:
            raise GeometryError("cylinder dimensions must be positive")
        if self.background_yield < 0:
            raise GeometryError("background yield must be non-negative")
        for tgt in self.targets:
            if not target_inside(tgt, self.cyl_radius, self.cyl_height, margin):
                raise GeometryError(f"target {tgt} is not inside the cylinder with {margin} cm margin")
        for i, a in enumerate(self.targets):
            for b in self.targets[i + 1:]:
                if targets_overlap(a, b):
                    raise OverlapError(f"targets overlap: {a} and {b}")

    def to_dict(self) -> dict:
        return {"cyl_radius": self.cyl_radius, "cyl_height": self.cyl_height,
                "targets": [t.to_dict() for t in self.targets],
                "background_yield": self.background_yield}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(float(d["cyl_radius"]), float(d["cyl_height"]),
                   tuple(TargetSpec.from_dict(t) for t in d["targets"]),
                   float(d.get("background_yield", 0.0)))


@dataclass
class Volume:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size != self.grid.size:
            raise GeometryError(f"volume has {data.size} entries, grid needs {self.grid.size}")
        self.data = data.reshape(self.grid.shape)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "Volume":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_flat(cls, x: np.ndarray, grid: GridSpec) -> "Volume":
        return cls(grid, np.asarray(x).reshape(grid.shape))

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


def target_inside(tgt: TargetSpec, cyl_radius: float, cyl_height: float,
                  margin: float = CONTAINMENT_MARGIN) -> bool:
    cx, cy, cz = tgt.center
    radial_ok = math.hypot(cx, cy) + tgt.radius <= cyl_radius - margin + 1e-12
    axial_ok = abs(cz) + tgt.height / 2 <= cyl_height / 2 - margin + 1e-12
    return radial_ok and axial_ok


def targets_overlap(a: TargetSpec, b: TargetSpec) -> bool:
    z_overlap = abs(a.center[2] - b.center[2]) < (a.height + b.height) / 2
    return z_overlap and edge_to_edge_distance(a, b) < 0


def edge_to_edge_distance(a: TargetSpec, b: TargetSpec) -> float:
    """Gap between two tube surfaces in the XY plane (negative when they overlap)."""
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) - (a.radius + b.radius)


def rasterize_phantom(spec: PhantomSpec, grid: GridSpec) -> Volume:
    """Voxelize a phantom by voxel-centre membership."""
    if not grid.contains_cylinder(spec.cyl_radius, spec.cyl_height):
        raise GeometryError("grid box does not contain the phantom cylinder")
    spec.validate()
    xx, yy, zz = grid.centers()
    data = np.where(grid.cylinder_mask(spec.cyl_radius, spec.cyl_height),
                    float(spec.background_yield), 0.0)
    for tgt in spec.targets:
        cx, cy, cz = tgt.center
        inside = ((xx - cx)**2 + (yy - cy)**2 <= tgt.radius**2) & (np.abs(zz - cz) <= tgt.height / 2)
        data[inside] = tgt.yield_
    return Volume(grid, data)


@dataclass
class SamplerConfig:
    """Ranges for random phantom generation.

    Targets after the first are placed next to the previous one at an
    edge-to-edge distance drawn from ``[min_eed, max_eed]``; with ``max_eed``
    unset every target is placed uniformly inside the cylinder instead.
    ``center_radius`` limits how far the first target's axis may sit from the
    cylinder axis. All targets share one z-centre, drawn uniformly within
    ``z_jitter`` of mid-height.
    """
    cyl_radius: float = 1.5
    cyl_height: float = 1.5
    n_targets: tuple[int, int] = (2, 2)
    radius: tuple[float, float] = (0.15, 0.15)
    height: tuple[float, float] = (0.5, 0.5)
    yield_: tuple[float, float] = (1.0, 1.0)
    min_eed: float = 0.1
    max_eed: float | None = 0.3
    center_radius: float | None = None
    z_jitter: float = 0.0
    margin: float = CONTAINMENT_MARGIN
    max_attempts: int = 1000

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def _uniform(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _point_in_disk(rng: np.random.Generator, radius: float) -> tuple[float, float]:
    r = radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    return r * math.cos(phi), r * math.sin(phi)


def sample_phantom_spec(rng: np.random.Generator, cfg: SamplerConfig) -> PhantomSpec:
    """Draw a random phantom satisfying containment and minimum-EED constraints."""
    count = int(rng.integers(cfg.n_targets[0], cfg.n_targets[1] + 1))
    for _ in range(cfg.max_attempts):
        radii = [_uniform(rng, cfg.radius) for _ in range(count)]
        heights = [_uniform(rng, cfg.height) for _ in range(count)]
        yields = [_uniform(rng, cfg.yield_) for _ in range(count)]
        z_room = cfg.cyl_height / 2 - cfg.margin - max(heights, default=0) / 2
        if z_room < 0:
            raise SamplingError("targets are taller than the cylinder allows")
        cz = float(rng.uniform(-1, 1)) * min(cfg.z_jitter, z_room)
        targets: list[TargetSpec] = []
        for k in range(count):
            if k == 0 or cfg.max_eed is None:
                room = cfg.cyl_radius - cfg.margin - radii[k]
                if k == 0 and cfg.center_radius is not None:
                    room = min(room, cfg.center_radius)
                if room < 0:
                    break
                cx, cy = _point_in_disk(rng, room)
            else:
                prev = targets[-1]
                gap = float(rng.uniform(cfg.min_eed, cfg.max_eed))
                dist = prev.radius + radii[k] + gap
                phi = rng.uniform(0, 2 * math.pi)
                cx = prev.center[0] + dist * math.cos(phi)
                cy = prev.center[1] + dist * math.sin(phi)
            tgt = TargetSpec((cx, cy, cz), radii[k], heights[k], yields[k])
            if not target_inside(tgt, cfg.cyl_radius, cfg.cyl_height, cfg.margin):
                break
            if any(edge_to_edge_distance(tgt, o) < cfg.min_eed for o in targets):
                break
            targets.append(tgt)
        if len(targets) == count:
            return PhantomSpec(cfg.cyl_radius, cfg.cyl_height, tuple(targets))
    raise SamplingError(f"no valid phantom after {cfg.max_attempts} attempts; constraints infeasible?")


def case_phantom(eed: float, case: int = 1, radius: float = 0.15, height: float = 0.5,
                 yield_: float = 1.0) -> PhantomSpec:
    """Two-target test configurations.

    Case 1 places the pair symmetrically about the cylinder axis; case 2 shifts
    the pair off-axis by half a centimetre along y.
    """
    half = radius + eed / 2
    offset = 0.0 if case == 1 else 0.5
    targets = (TargetSpec((-half, offset, 0.0), radius, height, yield_),
               TargetSpec((half, offset, 0.0), radius, height, yield_))
    return PhantomSpec(targets=targets)


def with_radius(spec: PhantomSpec, index: int, radius: float) -> PhantomSpec:
    targets = list(spec.targets)
    targets[index] = replace(targets[index], radius=radius)
    return replace(spec, targets=tuple(targets))
