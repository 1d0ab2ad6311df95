"""Photon-diffusion forward model on the voxel grid.

The diffusion equation ``-div(D grad phi) + mu_a phi = S`` is discretized with a
7-point finite-difference stencil. Voxels outside the phantom cylinder are
made nearly opaque by scaling their absorption, and the box faces carry a
Robin (partial-current) boundary condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import GeometryError, GridSpec, Volume

OUTSIDE_ABSORPTION_FACTOR = 100.0


class SolverError(RuntimeError):
    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class OpticalProps:
    mu_a: float = 0.02
    mu_s_prime: float = 10.0
    robin_a: float = 1.0

    def __post_init__(self):
        if self.mu_a <= 0 or self.mu_s_prime <= 0 or self.robin_a <= 0:
            raise ValueError(f"optical coefficients must be positive: {self}")

    @property
    def D(self) -> float:
        return 1.0 / (3.0 * (self.mu_a + self.mu_s_prime))


@dataclass
class SensorLayout:
    """Source and detector positions on the lateral surface of the cylinder.

    ``det_theta`` is the azimuth in ``[0, 2*pi)`` and ``det_h`` the height above
    the bottom face, in ``[0, height]``.
    """
    sources: np.ndarray
    detectors: np.ndarray
    radius: float
    height: float
    det_theta: np.ndarray = field(default=None)
    det_h: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        self.detectors = np.atleast_2d(np.asarray(self.detectors, dtype=float))
        if len(self.sources) == 0 or len(self.detectors) == 0:
            raise GeometryError("layout needs at least one source and one detector")
        if self.det_theta is None:
            self.det_theta = np.mod(np.arctan2(self.detectors[:, 1], self.detectors[:, 0]), 2 * np.pi)
        if self.det_h is None:
            self.det_h = self.detectors[:, 2] + self.height / 2

    @classmethod
    def ring(cls, radius: float = 1.5, height: float = 1.5, src_angles: int = 8, src_heights: int = 2,
             det_angles: int = 16, det_heights: int = 8) -> "SensorLayout":
        """Regular angle x height lattice; sources ordered angle-major."""
        def lattice(n_ang, n_h):
            pts = []
            for i in range(n_ang):
                th = 2 * np.pi * i / n_ang
                for k in range(n_h):
                    z = -height / 2 + (k + 0.5) * height / n_h
                    pts.append((radius * math.cos(th), radius * math.sin(th), z))
            return np.array(pts)
        return cls(lattice(src_angles, src_heights), lattice(det_angles, det_heights), radius, height)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    def check_on_boundary(self, grid: GridSpec) -> None:
        tol = 0.5 * max(grid.dx, grid.dy, grid.dz)
        for pts in (self.sources, self.detectors):
            rad = np.hypot(pts[:, 0], pts[:, 1])
            if np.any(np.abs(rad - self.radius) > tol) or np.any(np.abs(pts[:, 2]) > self.height / 2 + tol):
                raise GeometryError("layout point is off the cylinder surface")

    def to_dict(self) -> dict:
        return {"sources": self.sources.tolist(), "detectors": self.detectors.tolist(),
                "radius": self.radius, "height": self.height,
                "det_theta": self.det_theta.tolist(), "det_h": self.det_h.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorLayout":
        return cls(np.array(d["sources"]), np.array(d["detectors"]), d["radius"], d["height"],
                   np.array(d["det_theta"]), np.array(d["det_h"]))


@dataclass
class WeightMatrix:
    """Sensitivity matrix with row ``s * n_detectors + d`` for pair (s, d)."""
    matrix: sp.csr_matrix
    pairs: np.ndarray
    grid: GridSpec
    normalized: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x


@dataclass
class Measurement:
    values: np.ndarray
    pairs: np.ndarray
    noise: dict = field(default_factory=lambda: {"model": "none", "level": 0.0, "seed": None})


def _absorption_map(grid: GridSpec, props: OpticalProps, radius: float | None, height: float | None):
    mu_a = np.full(grid.shape, props.mu_a)
    if radius is not None:
        mu_a[~grid.cylinder_mask(radius, height)] *= OUTSIDE_ABSORPTION_FACTOR
    return mu_a


def assemble_diffusion_operator(grid: GridSpec, props: OpticalProps, radius: float | None = None,
                                height: float | None = None) -> sp.csr_matrix:
    """7-point FD operator for ``-div(D grad) + mu_a`` with Robin box faces.

    When ``radius`` is given, voxels outside the centred cylinder of that radius
    and ``height`` get their absorption multiplied by ``OUTSIDE_ABSORPTION_FACTOR``.
    The result is symmetric positive definite by construction.
    """
    mu_a = _absorption_map(grid, props, radius, height)
    D = 1.0 / (3.0 * (mu_a + props.mu_s_prime))
    idx = np.arange(grid.size).reshape(grid.shape)
    diag = mu_a.copy()
    rows, cols, vals = [], [], []
    # array axes are (z, y, x)
    for axis, h in ((0, grid.dz), (1, grid.dy), (2, grid.dx)):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        d1, d2 = D[lo], D[hi]
        coef = 2 * d1 * d2 / (d1 + d2) / h**2
        diag[lo] += coef
        diag[hi] += coef
        i, j, c = idx[lo].ravel(), idx[hi].ravel(), coef.ravel()
        rows += [i, j]
        cols += [j, i]
        vals += [-c, -c]
        # partial-current loss through the two box faces normal to this axis
        for end in (0, -1):
            face = [slice(None)] * 3
            face[axis] = end
            face = tuple(face)
            Df = D[face]
            diag[face] += 2 * Df / (h * (h + 4 * props.robin_a * Df))
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    op = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(grid.size, grid.size))
    op.sort_indices()
    return op


def solve_field(op, source: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients; output clamped at zero."""
    b = np.asarray(source, dtype=float).ravel()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    if not np.all(np.isfinite(b)):
        raise ValueError("source has non-finite entries")
    max_iter = max_iter or 10 * b.size
    inv_diag = 1.0 / op.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    history = [1.0]
    for _ in range(max_iter):
        Ap = op @ p
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        history.append(float(np.linalg.norm(r) / bnorm))
        if history[-1] <= rtol:
            break
        z = inv_diag * r
        rz_next = r @ z
        p = z + (rz_next / rz) * p
        rz = rz_next
    else:
        raise SolverError(f"CG did not reach rtol={rtol} in {max_iter} iterations", history)
    true_res = np.linalg.norm(b - op @ x) / bnorm
    if true_res > max(10 * rtol, 1e-8):
        raise SolverError(f"CG true residual {true_res:.2e} exceeds tolerance", history)
    if x.min() < -1e-12 * max(x.max(), 1.0):
        raise SolverError("field has significantly negative entries", history)
    return np.maximum(x, 0.0)


def injection_voxels(points: np.ndarray, grid: GridSpec, props: OpticalProps,
                     radius: float, height: float) -> np.ndarray:
    """Flat voxel index for each boundary point, one transport length inside the tissue."""
    mask = grid.cylinder_mask(radius, height).ravel()
    xx, yy, zz = (c.ravel() for c in grid.centers())
    inside = np.flatnonzero(mask)
    depth = 1.0 / props.mu_s_prime
    out = np.empty(len(points), dtype=np.int64)
    for k, (px, py, pz) in enumerate(points):
        rho = math.hypot(px, py)
        scale = max(rho - depth, 0.0) / rho if rho > 0 else 0.0
        qx, qy = px * scale, py * scale
        d2 = (xx[inside] - qx)**2 + (yy[inside] - qy)**2 + (zz[inside] - pz)**2
        out[k] = inside[np.argmin(d2)]
    return out


def point_fields(op, voxels: np.ndarray, grid: GridSpec, rtol: float = 1e-10) -> dict[int, np.ndarray]:
    """Unit-power point-source fields, solved once per distinct voxel."""
    fields = {}
    for v in voxels:
        v = int(v)
        if v not in fields:
            rhs = np.zeros(grid.size)
            rhs[v] = 1.0 / grid.voxel_volume
            fields[v] = solve_field(op, rhs, rtol=rtol)
    return fields


def build_weight_matrix(grid: GridSpec, props: OpticalProps, layout: SensorLayout,
                        normalized: bool = True, rtol: float = 1e-10) -> WeightMatrix:
    """Born sensitivity ``W[(s,d), j] = G_d(r_j) phi_s(r_j) dV``.

    Columns of voxels outside the cylinder are zero. With ``normalized`` each
    row is divided by the excitation reading ``phi_s`` at detector ``d``.
    """
    layout.check_on_boundary(grid)
    if not grid.contains_cylinder(layout.radius, layout.height):
        raise GeometryError("grid does not contain the layout cylinder")
    op = assemble_diffusion_operator(grid, props, layout.radius, layout.height)
    src_vox = injection_voxels(layout.sources, grid, props, layout.radius, layout.height)
    det_vox = injection_voxels(layout.detectors, grid, props, layout.radius, layout.height)
    fields = point_fields(op, np.concatenate([src_vox, det_vox]), grid, rtol)
    domain = np.flatnonzero(grid.cylinder_mask(layout.radius, layout.height).ravel())
    G = np.stack([fields[int(v)][domain] for v in det_vox])
    blocks = []
    for vs in src_vox:
        phi = fields[int(vs)]
        block = G * (phi[domain] * grid.voxel_volume)
        if normalized:
            block /= phi[det_vox][:, None]
        blocks.append(block)
    dense = np.concatenate(blocks)
    m = len(dense)
    matrix = sp.csr_matrix((dense.ravel(), np.tile(domain, m), np.arange(m + 1) * len(domain)),
                           shape=(m, grid.size))
    pairs = np.array([(s, d) for s in range(layout.n_sources) for d in range(layout.n_detectors)])
    return WeightMatrix(matrix, pairs, grid, normalized)


def simulate_measurements(W: WeightMatrix, x: Volume | np.ndarray, noise_level: float = 0.0,
                          rng: np.random.Generator | None = None, seed: int | None = None) -> Measurement:
    """``Phi = W x`` with optional multiplicative Gaussian noise, clamped at 0."""
    flat = x.flat() if isinstance(x, Volume) else np.asarray(x).ravel()
    if flat.size != W.shape[1]:
        raise ValueError(f"volume has {flat.size} voxels, W expects {W.shape[1]}")
    phi = np.asarray(W.matrix @ flat, dtype=float)
    if noise_level > 0:
        if rng is None:
            rng = np.random.default_rng(seed)
        phi = np.maximum(phi * (1.0 + noise_level * rng.standard_normal(phi.shape)), 0.0)
        noise = {"model": "multiplicative_gaussian", "level": noise_level, "seed": seed}
    else:
        noise = {"model": "none", "level": 0.0, "seed": None}
    return Measurement(phi, W.pairs, noise)


def view_groups(n_sources: int, num: int) -> list[np.ndarray]:
    if num < 1 or n_sources % num:
        raise ValueError(f"{n_sources} sources cannot be split into {num} equal views")
    return np.split(np.arange(n_sources), num)


def encode_condition_images(meas: Measurement, layout: SensorLayout, num: int, n: int) -> np.ndarray:
    """Cylindrical-unwrap detector images, one per angular source group, each scaled to max 1."""
    groups = view_groups(layout.n_sources, num)
    cols = np.rint(layout.det_theta / (2 * np.pi) * (n - 1)).astype(int)
    rows = np.rint(layout.det_h / layout.height * (n - 1)).astype(int)
    counts = np.zeros((n, n))
    np.add.at(counts, (rows, cols), 1.0)
    out = np.zeros((num, n, n))
    src_of_row = meas.pairs[:, 0]
    det_of_row = meas.pairs[:, 1]
    for g, members in enumerate(groups):
        sel = np.isin(src_of_row, members)
        reading = np.zeros(layout.n_detectors)
        np.add.at(reading, det_of_row[sel], meas.values[sel])
        img = np.zeros((n, n))
        np.add.at(img, (rows, cols), reading)
        img = np.divide(img, counts, out=np.zeros_like(img), where=counts > 0)
        peak = img.max()
        if peak > 0:
            img /= peak
        out[g] = img
    return out
