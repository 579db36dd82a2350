"""Damped, forced 2D Euler dynamics in vorticity form.

Advection uses the 9-point Arakawa Jacobian evaluated with a one-ring zero
extension of both arguments, which keeps the discrete sums of J, omega*J and
psi*J exactly zero for stream functions that vanish on the boundary.  Time
stepping is the three-stage Shu-Osher strong-stability-preserving Runge-Kutta
scheme; the same stepper drives the stochastic model, which only swaps in a
perturbed stream function.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fields import (
    BoundaryCondition,
    Grid,
    ScalarField,
    from_function,
    poisson_solve,
)

CFL_LIMIT = 0.5


class CflWarning(UserWarning):
    """Raised as a warning when a step exceeds the configured CFL bound."""


@dataclass(frozen=True)
class ModelParams:
    """Forcing strength a, gyre count b, damping rate r, time step dt."""

    a: float
    b: int
    r: float
    dt: float

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("forcing strength a must be nonnegative")
        if int(self.b) != self.b or self.b < 1:
            raise ValueError("gyre count b must be a positive integer")
        if self.r < 0:
            raise ValueError("damping rate r must be nonnegative")
        if self.dt <= 0:
            raise ValueError("time step dt must be positive")


def forcing_field(grid: Grid, a: float, b: int) -> ScalarField:
    """The stationary body force a*sin(b*pi*x)."""
    return from_function(grid, lambda x, y: a * np.sin(b * np.pi * x))


def arakawa_jacobian(psi: np.ndarray, omega: np.ndarray, h: float) -> np.ndarray:
    """9-point Arakawa Jacobian J(psi, omega) on nodal arrays, zero-extended.

    Both inputs are treated as zero outside the closed domain, so the discrete
    conservation identities hold over the full node set.
    """
    ny, nx = psi.shape
    p = np.zeros((ny + 2, nx + 2))
    o = np.zeros((ny + 2, nx + 2))
    p[1:-1, 1:-1] = psi
    o[1:-1, 1:-1] = omega

    pe, pw = p[1:-1, 2:], p[1:-1, :-2]
    pn, ps = p[2:, 1:-1], p[:-2, 1:-1]
    pne, pnw = p[2:, 2:], p[2:, :-2]
    pse, psw = p[:-2, 2:], p[:-2, :-2]
    oe, ow = o[1:-1, 2:], o[1:-1, :-2]
    on, os_ = o[2:, 1:-1], o[:-2, 1:-1]
    one, onw = o[2:, 2:], o[2:, :-2]
    ose, osw = o[:-2, 2:], o[:-2, :-2]

    j1 = (pe - pw) * (on - os_) - (pn - ps) * (oe - ow)
    j2 = pe * (one - ose) - pw * (onw - osw) - pn * (one - onw) + ps * (ose - osw)
    j3 = pne * (on - oe) - psw * (ow - os_) - pnw * (on - ow) + pse * (oe - os_)
    return (j1 + j2 + j3) / (12.0 * h * h)


def tendency(
    omega: ScalarField,
    psi: ScalarField,
    params: ModelParams,
    forcing: ScalarField | None = None,
) -> ScalarField:
    """Right-hand side -J(psi, omega) + Q - r*omega."""
    if omega.grid != psi.grid:
        raise ValueError("omega and psi must share one grid")
    if forcing is None:
        forcing = forcing_field(omega.grid, params.a, params.b)
    rhs = (
        -arakawa_jacobian(psi.values, omega.values, omega.grid.h)
        + forcing.values
        - params.r * omega.values
    )
    return ScalarField(omega.grid, rhs, BoundaryCondition.FREE)


def _max_speed(psi_values: np.ndarray, h: float) -> float:
    # componentwise max of the centered-difference velocity, cheap CFL proxy
    dx = np.abs(psi_values[:, 2:] - psi_values[:, :-2]).max(initial=0.0)
    dy = np.abs(psi_values[2:, :] - psi_values[:-2, :]).max(initial=0.0)
    return max(dx, dy) / (2.0 * h)


def check_cfl(psi: ScalarField, dt: float, limit: float = CFL_LIMIT) -> float:
    """Return the CFL number dt*max|u|/h and warn when it exceeds the limit."""
    h = psi.grid.h
    cfl = dt * _max_speed(psi.values, h) / h
    if cfl > limit:
        warnings.warn(
            f"CFL number {cfl:.3f} exceeds limit {limit}", CflWarning, stacklevel=2
        )
    return cfl


def _rk3(
    omega: ScalarField,
    params: ModelParams,
    stream_solver,
    forcing: ScalarField,
    noise_stream: np.ndarray | None = None,
    cfl_limit: float | None = CFL_LIMIT,
) -> ScalarField:
    """Shared Shu-Osher SSP-RK3 stage recursion.

    The stream function is recomputed from the stage vorticity; an optional
    noise stream function is held fixed across the three stages.
    """
    dt = params.dt

    def rhs(w: ScalarField, check: bool = False) -> np.ndarray:
        psi = stream_solver(w)
        psi_vals = psi.values
        if noise_stream is not None:
            psi_vals = psi_vals + noise_stream
        if check and cfl_limit is not None:
            h = w.grid.h
            cfl = dt * _max_speed(psi_vals, h) / h
            if cfl > cfl_limit:
                warnings.warn(
                    f"CFL number {cfl:.3f} exceeds limit {cfl_limit}",
                    CflWarning,
                    stacklevel=4,
                )
        return (
            -arakawa_jacobian(psi_vals, w.values, w.grid.h)
            + forcing.values
            - params.r * w.values
        )

    w0 = omega.values
    w1 = ScalarField(omega.grid, w0 + dt * rhs(omega, check=True), omega.bc)
    w2 = ScalarField(omega.grid, 0.75 * w0 + 0.25 * (w1.values + dt * rhs(w1)), omega.bc)
    w3 = (1.0 / 3.0) * w0 + (2.0 / 3.0) * (w2.values + dt * rhs(w2))
    return ScalarField(omega.grid, w3, omega.bc)


def ssprk3_step(
    omega: ScalarField,
    params: ModelParams,
    stream_solver=poisson_solve,
    forcing: ScalarField | None = None,
) -> ScalarField:
    """Advance the deterministic vorticity by one time step."""
    if forcing is None:
        forcing = forcing_field(omega.grid, params.a, params.b)
    return _rk3(omega, params, stream_solver, forcing)


def energy(omega: ScalarField, psi: ScalarField | None = None) -> float:
    """Signed quadratic invariant 0.5 * sum(psi * omega) * h^2."""
    if psi is None:
        psi = poisson_solve(omega)
    h2 = omega.grid.h ** 2
    return 0.5 * float(np.sum(psi.values * omega.values)) * h2


def enstrophy(omega: ScalarField) -> float:
    h2 = omega.grid.h ** 2
    return 0.5 * float(np.sum(omega.values ** 2)) * h2


def spin_initial_field(grid: Grid) -> ScalarField:
    """The multi-mode vorticity used to start spin-up runs."""

    def fn(x, y):
        return (
            np.sin(8 * np.pi * x) * np.sin(8 * np.pi * y)
            + 0.4 * np.cos(6 * np.pi * x) * np.cos(6 * np.pi * y)
            + 0.3 * np.cos(10 * np.pi * x) * np.cos(4 * np.pi * y)
            + 0.02 * np.sin(2 * np.pi * y)
            + 0.02 * np.sin(2 * np.pi * x)
        )

    return from_function(grid, fn)


@dataclass(frozen=True)
class SpinupRecord:
    step: int
    time: float
    energy: float
    enstrophy: float


def spinup(
    grid: Grid,
    params: ModelParams,
    t_end: float,
    record_every: int = 10,
    snapshot_every: int | None = None,
    abort_on_cfl: bool = False,
) -> tuple[ScalarField, list[SpinupRecord], list[ScalarField]]:
    """Integrate from the spin-up configuration until t_end.

    Returns the final vorticity, an energy/enstrophy time series and, when
    snapshot_every is set, the intermediate vorticity snapshots.
    """
    omega = spin_initial_field(grid)
    forcing = forcing_field(grid, params.a, params.b)
    n_steps = int(round(t_end / params.dt))
    records = [SpinupRecord(0, 0.0, energy(omega), enstrophy(omega))]
    snapshots: list[ScalarField] = []
    for step in range(1, n_steps + 1):
        if abort_on_cfl:
            with warnings.catch_warnings():
                warnings.simplefilter("error", CflWarning)
                try:
                    omega = ssprk3_step(omega, params, forcing=forcing)
                except CflWarning as w:
                    raise RuntimeError(f"spin-up aborted at step {step}: {w}") from w
        else:
            omega = ssprk3_step(omega, params, forcing=forcing)
        if step % record_every == 0 or step == n_steps:
            records.append(
                SpinupRecord(step, step * params.dt, energy(omega), enstrophy(omega))
            )
        if snapshot_every is not None and step % snapshot_every == 0:
            snapshots.append(omega)
    return omega, records, snapshots


def equilibrium_reached(records: list[SpinupRecord], window_fraction: float = 0.1,
                        threshold: float = 0.05) -> bool:
    """Relative energy change over the trailing window is below the threshold."""
    if len(records) < 3:
        return False
    n_tail = max(2, int(len(records) * window_fraction))
    tail = records[-n_tail:]
    e = np.array([r.energy for r in tail])
    scale = max(abs(e).max(), 1e-300)
    return float(abs(e.max() - e.min()) / scale) <= threshold
