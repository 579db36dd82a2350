"""Initial-ensemble construction by random-time-scaled advection.

A pool member's frozen velocity, scaled by a Gaussian factor, advects the
reference vorticity for a fixed number of fine steps; the result is coarse
grained.  The advection is linear (no forcing, no damping) and conserves the
discrete vorticity Casimirs up to time-stepping error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stochastic
from .dynamics import ModelParams, _max_speed, _rk3
from .fields import (
    Grid,
    ScalarField,
    VectorField,
    coarse_grain,
    curl,
    perp_grad,
    poisson_solve,
    read_scalar,
    write_scalar,
    zeros,
)
from .rng import RngKey, Tag, stream


@dataclass(frozen=True)
class DeformationConfig:
    pool: list[ScalarField]          # fine vorticity snapshots
    epsilon: float = 0.25            # variance of the scaling factor
    n_steps: int = 104               # fine advection steps

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if not self.pool:
            raise ValueError("snapshot pool is empty")


def deform(
    omega_truth: ScalarField,
    u_sample: VectorField,
    beta: float,
    n_steps: int,
    params: ModelParams,
    coarse: Grid,
) -> ScalarField:
    """Advect omega_truth with the frozen velocity beta*u_sample, then coarse grain.

    The advecting stream function is recovered from the sampled velocity, so
    the transport is done in the same conservative Jacobian form as the
    dynamics.  Steps violating the CFL bound are subdivided automatically.
    """
    grid = omega_truth.grid
    if u_sample.grid != grid:
        raise ValueError("truth and sampled velocity must share one grid")
    if n_steps == 0 or beta == 0.0:
        return coarse_grain(omega_truth, coarse)

    psi_adv = poisson_solve(curl(u_sample))
    psi_frozen = ScalarField(grid, beta * psi_adv.values, psi_adv.bc)
    speed = _max_speed(psi_frozen.values, grid.h)
    substeps = max(1, int(np.ceil(speed * params.dt / (0.5 * grid.h))))
    sub_params = ModelParams(a=0.0, b=1, r=0.0, dt=params.dt / substeps)
    frozen_stream = lambda w: psi_frozen
    no_forcing = zeros(grid)

    omega = omega_truth
    for _ in range(n_steps * substeps):
        omega = _rk3(omega, sub_params, frozen_stream, no_forcing)
    return coarse_grain(omega, coarse)


@dataclass(frozen=True)
class MemberRecord:
    member: int
    beta: float
    pool_index: int
    n_steps: int
    seed: int


def sample_initial_ensemble(
    cfg: DeformationConfig,
    n_members: int,
    key: RngKey,
    params: ModelParams,
    coarse: Grid,
    omega_truth: ScalarField | None = None,
) -> tuple[list[ScalarField], list[MemberRecord]]:
    """Independent deformation draws; the pool member and scaling are independent.

    When omega_truth is omitted the advected reference is the first pool
    snapshot.  Member i's randomness is keyed by (key..., i).
    """
    if n_members < 1:
        raise ValueError("need at least one member")
    reference = omega_truth if omega_truth is not None else cfg.pool[0]
    members = []
    records = []
    for i in range(n_members):
        r = stream(int(Tag.INIT), *key, i)
        pool_index = int(r.integers(len(cfg.pool)))
        beta = float(r.normal(0.0, np.sqrt(cfg.epsilon)))
        velocity = perp_grad(poisson_solve(cfg.pool[pool_index]))
        members.append(deform(reference, velocity, beta, cfg.n_steps, params, coarse))
        records.append(MemberRecord(i, beta, pool_index, cfg.n_steps, int(key[0]) if key else 0))
    return members, records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_ensemble(directory, members: list[ScalarField], records: list[MemberRecord] | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(members):
        write_scalar(directory / f"member_{i:04d}.sfld", m)
    if records is not None:
        with open(directory / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["member", "beta", "pool_index", "n_steps", "seed"])
            for rec in records:
                writer.writerow(
                    [rec.member, repr(rec.beta), rec.pool_index, rec.n_steps, rec.seed]
                )


def load_ensemble(directory) -> list[ScalarField]:
    directory = Path(directory)
    paths = sorted(directory.glob("member_????.sfld"))
    if not paths:
        raise ValueError(f"no ensemble members under {directory}")
    return [read_scalar(p) for p in paths]


def save_assimilation_checkpoint(directory, window: int, particles, prior_members) -> None:
    """States, parents and paths of the filter ensemble plus the no-DA companion."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(particles):
        write_scalar(directory / f"member_{i:04d}.sfld", p.state)
        write_scalar(directory / f"parent_{i:04d}.sfld", p.parent)
        if p.path is not None:
            stochastic.write_path(directory / f"member_{i:04d}.path", p.path)
    for i, m in enumerate(prior_members):
        write_scalar(directory / f"prior_{i:04d}.sfld", m)
    (directory / "meta.json").write_text(
        json.dumps({"window": window, "n_members": len(particles)}) + "\n"
    )


def load_assimilation_checkpoint(directory):
    """Returns (window, states, prior_members)."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    states = load_ensemble(directory)
    if len(states) != meta["n_members"]:
        raise ValueError("checkpoint member count mismatch")
    prior = [read_scalar(p) for p in sorted(directory.glob("prior_????.sfld"))]
    return int(meta["window"]), states, prior
