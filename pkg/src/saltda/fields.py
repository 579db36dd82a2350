"""Scalar and vector fields on a uniform nodal grid over the unit square.

Values are stored row-major with the y index outermost, so ``values[j, i]``
is the nodal value at ``(x, y) = (i*h, j*h)``.  Elliptic solves use a
sine-transform diagonalization of the 5-point Laplacian, which is an exact
direct solve for homogeneous Dirichlet data.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

SCALAR_MAGIC = b"SALTFLD1"
VECTOR_MAGIC = b"SALTVEC1"
FORMAT_VERSION = 1


class BoundaryCondition(enum.IntEnum):
    DIRICHLET_ZERO = 0
    FREE = 1


@dataclass(frozen=True)
class Grid:
    """Uniform grid of n x n cells on [0,1]^2 with (n+1)^2 nodes."""

    n: int

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"grid needs at least 4 cells per side, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def nodes(self) -> int:
        return self.n + 1

    def coords_1d(self) -> np.ndarray:
        return np.arange(self.nodes) * self.h

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodal coordinate arrays (x, y), each shaped (n+1, n+1), y outer."""
        c = self.coords_1d()
        x, y = np.meshgrid(c, c, indexing="xy")
        return x, y


def _as_readonly(values: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray
    bc: BoundaryCondition = BoundaryCondition.FREE

    def __post_init__(self):
        vals = self.values
        if vals.shape != (self.grid.nodes, self.grid.nodes):
            raise ValueError(
                f"values shape {vals.shape} does not match grid nodes {self.grid.nodes}"
            )
        vals = _as_readonly(vals)
        object.__setattr__(self, "values", vals)
        if self.bc == BoundaryCondition.DIRICHLET_ZERO:
            if (
                np.any(vals[0, :]) or np.any(vals[-1, :])
                or np.any(vals[:, 0]) or np.any(vals[:, -1])
            ):
                raise ValueError("DirichletZero field has nonzero boundary values")

    def require_finite(self, what: str = "field") -> "ScalarField":
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{what} contains non-finite values")
        return self


@dataclass(frozen=True)
class VectorField:
    x: ScalarField
    y: ScalarField

    def __post_init__(self):
        if self.x.grid != self.y.grid:
            raise ValueError("vector components must share one grid")

    @property
    def grid(self) -> Grid:
        return self.x.grid


def zeros(grid: Grid, bc: BoundaryCondition = BoundaryCondition.FREE) -> ScalarField:
    return ScalarField(grid, np.zeros((grid.nodes, grid.nodes)), bc)


def from_function(grid: Grid, fn, bc: BoundaryCondition = BoundaryCondition.FREE) -> ScalarField:
    x, y = grid.mesh()
    return ScalarField(grid, fn(x, y), bc)


# ---------------------------------------------------------------------------
# elliptic solvers
# ---------------------------------------------------------------------------

_EIG_CACHE: dict[int, np.ndarray] = {}


def _neg_laplacian_eigenvalues(n: int) -> np.ndarray:
    """Eigenvalues of -Laplacian_h on the (n-1)^2 interior sine modes."""
    lam = _EIG_CACHE.get(n)
    if lam is None:
        k = np.arange(1, n)
        lam1 = 4.0 * n * n * np.sin(0.5 * np.pi * k / n) ** 2
        lam = lam1[:, None] + lam1[None, :]
        _EIG_CACHE[n] = lam
    return lam


def poisson_solve(f: ScalarField) -> ScalarField:
    """Solve Laplacian_h(psi) = f on interior nodes with psi = 0 on the boundary."""
    f.require_finite("poisson right-hand side")
    n = f.grid.n
    fh = sfft.dstn(f.values[1:-1, 1:-1], type=1)
    psih = fh / (-_neg_laplacian_eigenvalues(n))
    out = np.zeros((n + 1, n + 1))
    out[1:-1, 1:-1] = sfft.idstn(psih, type=1)
    return ScalarField(f.grid, out, BoundaryCondition.DIRICHLET_ZERO)


def helmholtz_inverse(f: ScalarField, k: float) -> ScalarField:
    """Apply (I - Laplacian_h / k^2)^-1 with zero Dirichlet boundary data."""
    if k <= 0:
        raise ValueError(f"helmholtz scale k must be positive, got {k}")
    f.require_finite("helmholtz right-hand side")
    n = f.grid.n
    fh = sfft.dstn(f.values[1:-1, 1:-1], type=1)
    gh = fh / (1.0 + _neg_laplacian_eigenvalues(n) / (k * k))
    out = np.zeros((n + 1, n + 1))
    out[1:-1, 1:-1] = sfft.idstn(gh, type=1)
    return ScalarField(f.grid, out, BoundaryCondition.DIRICHLET_ZERO)


def laplacian(f: ScalarField) -> ScalarField:
    """5-point Laplacian at interior nodes, second-order one-sided at the boundary."""
    v = f.values
    h2 = f.grid.h ** 2
    out = np.empty_like(v)
    out[1:-1, 1:-1] = (
        v[1:-1, 2:] + v[1:-1, :-2] + v[2:, 1:-1] + v[:-2, 1:-1] - 4.0 * v[1:-1, 1:-1]
    ) / h2

    def one_sided(a, b, c, d):
        # f'' at the first of four equally spaced samples, O(h^2)
        return (2.0 * a - 5.0 * b + 4.0 * c - d) / h2

    dxx = np.empty_like(v)
    dyy = np.empty_like(v)
    dxx[:, 1:-1] = (v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]) / h2
    dxx[:, 0] = one_sided(v[:, 0], v[:, 1], v[:, 2], v[:, 3])
    dxx[:, -1] = one_sided(v[:, -1], v[:, -2], v[:, -3], v[:, -4])
    dyy[1:-1, :] = (v[2:, :] - 2.0 * v[1:-1, :] + v[:-2, :]) / h2
    dyy[0, :] = one_sided(v[0, :], v[1, :], v[2, :], v[3, :])
    dyy[-1, :] = one_sided(v[-1, :], v[-2, :], v[-3, :], v[-4, :])

    edge = dxx + dyy
    out[0, :] = edge[0, :]
    out[-1, :] = edge[-1, :]
    out[:, 0] = edge[:, 0]
    out[:, -1] = edge[:, -1]
    return ScalarField(f.grid, out, BoundaryCondition.FREE)


def perp_grad(psi: ScalarField) -> VectorField:
    """Velocity (-d psi/dy, d psi/dx); central interior, one-sided O(h^2) edges."""
    psi.require_finite("stream function")
    h = psi.grid.h
    dpsi_dx = np.gradient(psi.values, h, axis=1, edge_order=2)
    dpsi_dy = np.gradient(psi.values, h, axis=0, edge_order=2)
    ux = ScalarField(psi.grid, -dpsi_dy, BoundaryCondition.FREE)
    uy = ScalarField(psi.grid, dpsi_dx, BoundaryCondition.FREE)
    return VectorField(ux, uy)


def curl(u: VectorField) -> ScalarField:
    """Scalar vorticity d(uy)/dx - d(ux)/dy of a planar vector field."""
    h = u.grid.h
    duy_dx = np.gradient(u.y.values, h, axis=1, edge_order=2)
    dux_dy = np.gradient(u.x.values, h, axis=0, edge_order=2)
    return ScalarField(u.grid, duy_dx - dux_dy, BoundaryCondition.FREE)


def velocity_from_vorticity(omega: ScalarField) -> VectorField:
    return perp_grad(poisson_solve(omega))


# ---------------------------------------------------------------------------
# point sampling
# ---------------------------------------------------------------------------

def _bilinear(values: np.ndarray, n: int, pts: np.ndarray) -> np.ndarray:
    xs = pts[:, 0] * n
    ys = pts[:, 1] * n
    ix = np.minimum(np.floor(xs).astype(np.int64), n - 1)
    iy = np.minimum(np.floor(ys).astype(np.int64), n - 1)
    fx = xs - ix
    fy = ys - iy
    v00 = values[iy, ix]
    v01 = values[iy, ix + 1]
    v10 = values[iy + 1, ix]
    v11 = values[iy + 1, ix + 1]
    return (
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
        + fy * ((1.0 - fx) * v10 + fx * v11)
    )


def _check_points(pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.shape[1] != 2:
        raise ValueError("points must be (x, y) pairs")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("sample point outside the unit square")
    return pts


def sample_at(u: VectorField, points) -> np.ndarray:
    """Bilinear samples of both components; returns an array of shape (npts, 2).

    Points on cell edges belong to the lower-left cell except on the top/right
    domain boundary.
    """
    pts = _check_points(points)
    n = u.grid.n
    out = np.empty((pts.shape[0], 2))
    out[:, 0] = _bilinear(u.x.values, n, pts)
    out[:, 1] = _bilinear(u.y.values, n, pts)
    return out


def sample_scalar_at(f: ScalarField, points) -> np.ndarray:
    pts = _check_points(points)
    return _bilinear(f.values, f.grid.n, pts)


# ---------------------------------------------------------------------------
# coarse graining
# ---------------------------------------------------------------------------

def restrict(f: ScalarField, coarse: Grid, bc: BoundaryCondition | None = None) -> ScalarField:
    """Nodal subsampling onto a coarse grid whose cell count divides the fine one."""
    fine_n = f.grid.n
    if fine_n % coarse.n != 0:
        raise ValueError(f"fine n={fine_n} not divisible by coarse n={coarse.n}")
    stride = fine_n // coarse.n
    return ScalarField(coarse, f.values[::stride, ::stride], f.bc if bc is None else bc)


def coarse_grain(omega_fine: ScalarField, coarse: Grid) -> ScalarField:
    """Smooth a fine vorticity with the inverse Helmholtz operator and restrict.

    The smoothing acts on the stream function with scale k equal to the coarse
    cell count; the result is returned as a coarse-grid vorticity.
    """
    psi = poisson_solve(omega_fine)
    psi_smooth = helmholtz_inverse(psi, float(coarse.n))
    psi_c = restrict(psi_smooth, coarse)
    return laplacian(psi_c)


def coarse_grain_stream(omega_fine: ScalarField, coarse: Grid) -> ScalarField:
    psi = poisson_solve(omega_fine)
    psi_smooth = helmholtz_inverse(psi, float(coarse.n))
    return restrict(psi_smooth, coarse)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _pack_header(magic: bytes, bc: BoundaryCondition, n: int) -> bytes:
    return magic + struct.pack("<IIQ", FORMAT_VERSION, int(bc), n)


def _unpack_header(buf: bytes, magic: bytes) -> tuple[BoundaryCondition, int]:
    if buf[:8] != magic:
        raise ValueError(f"bad magic {buf[:8]!r}, expected {magic!r}")
    version, bc, n = struct.unpack("<IIQ", buf[8:24])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    return BoundaryCondition(bc), int(n)


def write_scalar(path, f: ScalarField) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack_header(SCALAR_MAGIC, f.bc, f.grid.n))
        fh.write(f.values.astype("<f8").tobytes())


def read_scalar(path) -> ScalarField:
    with open(path, "rb") as fh:
        bc, n = _unpack_header(fh.read(24), SCALAR_MAGIC)
        nodes = n + 1
        data = np.frombuffer(fh.read(nodes * nodes * 8), dtype="<f8")
    if data.size != nodes * nodes:
        raise ValueError("truncated scalar field payload")
    return ScalarField(Grid(n), data.reshape(nodes, nodes).copy(), bc)


def write_vector(path, u: VectorField) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack_header(VECTOR_MAGIC, u.x.bc, u.grid.n))
        fh.write(u.x.values.astype("<f8").tobytes())
        fh.write(u.y.values.astype("<f8").tobytes())


def read_vector(path) -> VectorField:
    with open(path, "rb") as fh:
        bc, n = _unpack_header(fh.read(24), VECTOR_MAGIC)
        nodes = n + 1
        data = np.frombuffer(fh.read(2 * nodes * nodes * 8), dtype="<f8")
    if data.size != 2 * nodes * nodes:
        raise ValueError("truncated vector field payload")
    grid = Grid(n)
    half = nodes * nodes
    ux = ScalarField(grid, data[:half].reshape(nodes, nodes).copy(), bc)
    uy = ScalarField(grid, data[half:].reshape(nodes, nodes).copy(), bc)
    return VectorField(ux, uy)
