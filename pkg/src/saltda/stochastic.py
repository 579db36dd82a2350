"""Stochastic transport model: noise basis, Brownian paths, SPDE stepping.

The noise enters the advecting velocity through its stream function, so one
step of the stochastic model is the deterministic SSP-RK3 update with the
stream function shifted by sum_i zeta_i * dW_i/dt, held fixed across stages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .fields import (
    BoundaryCondition,
    Grid,
    ScalarField,
    coarse_grain,
    poisson_solve,
)

BASIS_MAGIC = b"SALTEOF1"
PATH_MAGIC = b"SALTPTH1"


@dataclass(frozen=True)
class NoiseBasis:
    """Time-constant noise stream functions with amplitudes absorbed."""

    grid: Grid
    zetas: np.ndarray       # (m, nodes, nodes), zero on the boundary
    spectrum: np.ndarray    # (m,) explained-variance weights, for reporting

    def __post_init__(self):
        z = np.ascontiguousarray(self.zetas, dtype=np.float64)
        s = np.ascontiguousarray(self.spectrum, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] < 1:
            raise ValueError("need at least one noise mode")
        if z.shape[1:] != (self.grid.nodes, self.grid.nodes):
            raise ValueError("mode shape does not match grid")
        if s.shape != (z.shape[0],):
            raise ValueError("spectrum length does not match mode count")
        z.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "zetas", z)
        object.__setattr__(self, "spectrum", s)

    @property
    def m(self) -> int:
        return self.zetas.shape[0]

    def mode(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.zetas[i], BoundaryCondition.DIRICHLET_ZERO)

    def check_orthogonality(self, tol: float = 1e-8) -> None:
        flat = self.zetas.reshape(self.m, -1)
        gram = flat @ flat.T
        norms = np.sqrt(np.diag(gram))
        off = gram - np.diag(np.diag(gram))
        if np.max(np.abs(off)) > tol * np.max(norms) ** 2:
            raise ValueError("noise modes are not mutually orthogonal")


@dataclass(frozen=True)
class PathIncrements:
    """Brownian increments over one assimilation window, shape (m, n_sub)."""

    dw: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.dw, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("increments must be a 2-D (m, n_sub) array")
        if not np.all(np.isfinite(d)):
            raise ValueError("increments contain non-finite entries")
        d.setflags(write=False)
        object.__setattr__(self, "dw", d)

    @property
    def m(self) -> int:
        return self.dw.shape[0]

    @property
    def n_sub(self) -> int:
        return self.dw.shape[1]


def brownian_increments(rng: np.random.Generator, m: int, n_sub: int, dt: float) -> PathIncrements:
    if m < 1 or n_sub < 1:
        raise ValueError("mode count and substep count must be at least 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return PathIncrements(rng.normal(0.0, np.sqrt(dt), size=(m, n_sub)))


def blend_paths(w: PathIncrements, z: PathIncrements, rho: float) -> PathIncrements:
    """Autoregressive path blend rho*W + sqrt(1-rho^2)*Z."""
    if w.dw.shape != z.dw.shape:
        raise ValueError("path shapes differ")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if rho == 1.0:
        return w
    if rho == 0.0:
        return z
    return PathIncrements(rho * w.dw + np.sqrt(1.0 - rho * rho) * z.dw)


def spde_step(
    q: ScalarField,
    dw_col: np.ndarray,
    basis: NoiseBasis,
    params: dynamics.ModelParams,
    forcing: ScalarField | None = None,
) -> ScalarField:
    """One SSP-RK3 step with the noise stream function frozen over the step."""
    if q.grid != basis.grid:
        raise ValueError("state and noise basis live on different grids")
    dw_col = np.asarray(dw_col, dtype=np.float64)
    if dw_col.shape != (basis.m,):
        raise ValueError(f"expected {basis.m} increments, got shape {dw_col.shape}")
    if forcing is None:
        forcing = dynamics.forcing_field(q.grid, params.a, params.b)
    noise_stream = np.einsum("i,ijk->jk", dw_col / params.dt, basis.zetas)
    return dynamics._rk3(q, params, poisson_solve, forcing, noise_stream=noise_stream)


def propagate_window(
    parent: ScalarField,
    path: PathIncrements,
    basis: NoiseBasis,
    params: dynamics.ModelParams,
    forcing: ScalarField | None = None,
) -> ScalarField:
    """Deterministic function of (parent, path): n_sub chained SPDE steps."""
    if path.m != basis.m:
        raise ValueError("path mode count does not match basis")
    if forcing is None:
        forcing = dynamics.forcing_field(parent.grid, params.a, params.b)
    q = parent
    for j in range(path.n_sub):
        q = spde_step(q, path.dw[:, j], basis, params, forcing=forcing)
    return q


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def principal_modes(samples: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PCA of row-vector samples about their mean.

    Returns (modes, eigenvalues, explained_fractions) keeping the smallest
    number of modes whose cumulative explained variance reaches `fraction`.
    Eigenvalues are those of the sample covariance (ddof=1); modes have unit
    Euclidean norm.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples for a covariance")
    centered = samples - samples.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    eig = svals ** 2 / (samples.shape[0] - 1)
    total = eig.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise ValueError("degenerate samples: zero residual variance")
    keep = eig > 1e-12 * eig[0]
    eig = eig[keep]
    vt = vt[keep]
    explained = eig / total
    cumulative = np.cumsum(explained)
    m = int(np.searchsorted(cumulative, fraction - 1e-12) + 1)
    m = min(m, eig.size)
    return vt[:m], eig[:m], explained[:m]


def calibrate_xi(
    fine_snapshots: list[ScalarField],
    coarse: Grid,
    params_coarse: dynamics.ModelParams,
    fraction: float = 0.5,
) -> NoiseBasis:
    """Simplified residual-based noise calibration.

    Fine vorticity snapshots spaced by one coarse step are coarse grained;
    the residual between each coarse-grained snapshot and one deterministic
    coarse step from its predecessor is converted to a stream function, and
    the principal components of those residuals (scaled to unit-variance
    Brownian drivers over a coarse step) become the noise modes.
    """
    if len(fine_snapshots) < 2:
        raise ValueError("need at least 2 snapshots to form residuals")
    forcing = dynamics.forcing_field(coarse, params_coarse.a, params_coarse.b)
    states = [coarse_grain(snap, coarse) for snap in fine_snapshots]
    residual_streams = []
    for prev, nxt in zip(states[:-1], states[1:]):
        predicted = dynamics.ssprk3_step(prev, params_coarse, forcing=forcing)
        residual = ScalarField(coarse, nxt.values - predicted.values)
        residual_streams.append(poisson_solve(residual).values.ravel())
    modes, eig, explained = principal_modes(np.array(residual_streams), fraction)
    nodes = coarse.nodes
    scale = np.sqrt(eig / params_coarse.dt)
    zetas = (modes * scale[:, None]).reshape(-1, nodes, nodes).copy()
    # modes live in the span of zero-boundary residual streams; clamp roundoff
    zetas[:, 0, :] = 0.0
    zetas[:, -1, :] = 0.0
    zetas[:, :, 0] = 0.0
    zetas[:, :, -1] = 0.0
    return NoiseBasis(coarse, zetas, explained)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_noise_basis(path, basis: NoiseBasis) -> None:
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<IQQ", 1, basis.grid.n, basis.m))
        fh.write(basis.spectrum.astype("<f8").tobytes())
        fh.write(basis.zetas.astype("<f8").tobytes())


def read_noise_basis(path) -> NoiseBasis:
    with open(path, "rb") as fh:
        if fh.read(8) != BASIS_MAGIC:
            raise ValueError("not a noise-basis file")
        version, n, m = struct.unpack("<IQQ", fh.read(20))
        if version != 1:
            raise ValueError(f"unsupported noise-basis version {version}")
        spectrum = np.frombuffer(fh.read(m * 8), dtype="<f8").copy()
        nodes = n + 1
        zetas = np.frombuffer(fh.read(m * nodes * nodes * 8), dtype="<f8")
        if zetas.size != m * nodes * nodes:
            raise ValueError("truncated noise-basis payload")
        zetas = zetas.reshape(m, nodes, nodes).copy()
    return NoiseBasis(Grid(int(n)), zetas, spectrum)


def write_path(path, increments: PathIncrements) -> None:
    with open(path, "wb") as fh:
        fh.write(PATH_MAGIC)
        fh.write(struct.pack("<QQ", increments.m, increments.n_sub))
        fh.write(increments.dw.astype("<f8").tobytes())


def read_path(path) -> PathIncrements:
    with open(path, "rb") as fh:
        if fh.read(8) != PATH_MAGIC:
            raise ValueError("not a path file")
        m, n_sub = struct.unpack("<QQ", fh.read(16))
        dw = np.frombuffer(fh.read(m * n_sub * 8), dtype="<f8")
    if dw.size != m * n_sub:
        raise ValueError("truncated path payload")
    return PathIncrements(dw.reshape(m, n_sub).copy())
