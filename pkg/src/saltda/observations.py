"""Weather stations, observation-noise calibration and the Gaussian likelihood.

Each station reports both velocity components, so d_y stations produce 2*d_y
scalar observations.  Noise standard deviations are calibrated from the
within-coarse-cell variability of fine-grid velocity snapshots and evaluated
at the stations; per-station noise draws come from streams keyed by station
coordinates so nested station sets see identical noise at shared stations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fields import (
    Grid,
    ScalarField,
    VectorField,
    sample_at,
    velocity_from_vorticity,
)
from .rng import RngKey, Tag, station_stream


@dataclass(frozen=True)
class StationSet:
    """s x s lattice of stations at (i/(s-1), j/(s-1))."""

    s: int
    coords: np.ndarray  # (d_y, 2), station-major with y outer

    @property
    def d_y(self) -> int:
        return self.s * self.s


def make_stations(s: int) -> StationSet:
    if s < 2:
        raise ValueError("need at least 2 stations per side")
    ticks = np.arange(s) / (s - 1)
    x, y = np.meshgrid(ticks, ticks, indexing="xy")
    coords = np.column_stack([x.ravel(), y.ravel()])
    coords.setflags(write=False)
    return StationSet(s, coords)


@dataclass(frozen=True)
class ObsNoise:
    """Per-station, per-component observation standard deviations."""

    sigmas: np.ndarray  # (d_y, 2)
    lam: float
    sigma_floor: float

    def __post_init__(self):
        s = np.ascontiguousarray(self.sigmas, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 2:
            raise ValueError("sigmas must have shape (d_y, 2)")
        if np.any(s < self.sigma_floor) or self.sigma_floor <= 0:
            raise ValueError("all sigmas must be at least the positive floor")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)


@dataclass(frozen=True)
class Observation:
    step: int
    values: np.ndarray  # (d_y, 2), x then y component per station

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("observation values must have shape (d_y, 2)")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _coarse_cell_means(values: np.ndarray, fine: Grid, coarse: Grid) -> np.ndarray:
    """Per-node mean of its containing coarse cell (lower-left ownership)."""
    stride = fine.n // coarse.n
    idx = np.minimum(np.arange(fine.nodes) // stride, coarse.n - 1)
    cell_flat = idx[:, None] * coarse.n + idx[None, :]
    sums = np.bincount(cell_flat.ravel(), weights=values.ravel(),
                       minlength=coarse.n * coarse.n)
    counts = np.bincount(cell_flat.ravel(), minlength=coarse.n * coarse.n)
    return (sums / counts)[cell_flat]


def calibrate_obs_noise(
    fine_snapshots: list[VectorField],
    coarse: Grid,
    stations: StationSet,
    lam: float,
    sigma_floor: float = 1e-6,
) -> ObsNoise:
    """Observation error scaled from local truth variability.

    For each fine node and velocity component the absolute deviation from the
    node's coarse-cell mean is averaged over the snapshots and scaled by lam;
    the resulting field is sampled at the stations and floored.
    """
    if not fine_snapshots:
        raise ValueError("need at least one snapshot")
    if lam <= 0:
        raise ValueError("lam must be positive")
    fine = fine_snapshots[0].grid
    if fine.n % coarse.n != 0:
        raise ValueError("fine grid must refine the coarse grid")
    acc = np.zeros((2, fine.nodes, fine.nodes))
    for snap in fine_snapshots:
        if snap.grid != fine:
            raise ValueError("snapshots must share one grid")
        for c, comp in enumerate((snap.x.values, snap.y.values)):
            acc[c] += np.abs(comp - _coarse_cell_means(comp, fine, coarse))
    acc *= lam / len(fine_snapshots)
    sig_x = ScalarField(fine, acc[0])
    sig_y = ScalarField(fine, acc[1])
    sampled = sample_at(VectorField(sig_x, sig_y), stations.coords)
    return ObsNoise(np.maximum(sampled, sigma_floor), lam, sigma_floor)


def observe(
    truth: VectorField,
    stations: StationSet,
    noise: ObsNoise,
    key: RngKey,
    step: int = 0,
) -> Observation:
    """Noisy station samples of the truth velocity.

    `key` identifies the draw (typically (seed, window)); the per-station
    substream is derived from the station coordinates.
    """
    if noise.sigmas.shape[0] != stations.d_y:
        raise ValueError("noise table does not match station count")
    clean = sample_at(truth, stations.coords)
    values = np.empty_like(clean)
    base = (int(Tag.OBSERVE), *key)
    for j, (x, y) in enumerate(stations.coords):
        r = station_stream(base, x, y)
        values[j] = clean[j] + noise.sigmas[j] * r.standard_normal(2)
    return Observation(step, values)


def station_noise_sigma(noise: ObsNoise, stations: StationSet, point) -> np.ndarray:
    """Sigma pair of the station exactly at `point` (used for probe points)."""
    match = np.all(np.isclose(stations.coords, np.asarray(point), atol=1e-12), axis=1)
    idx = np.nonzero(match)[0]
    if idx.size != 1:
        raise ValueError(f"point {point} is not a station")
    return noise.sigmas[idx[0]]


def log_likelihood(
    state: ScalarField,
    y: Observation,
    stations: StationSet,
    noise: ObsNoise,
) -> float:
    """Gaussian log-density of y given the state, additive constant omitted."""
    if y.values.shape[0] != stations.d_y:
        raise ValueError("observation does not match station count")
    velocity = velocity_from_vorticity(state)
    predicted = sample_at(velocity, stations.coords)
    z = (predicted - y.values) / noise.sigmas
    return -0.5 * float(np.sum(z * z))


def log_likelihood_of_velocity(
    velocity: VectorField,
    y: Observation,
    stations: StationSet,
    noise: ObsNoise,
) -> float:
    predicted = sample_at(velocity, stations.coords)
    z = (predicted - y.values) / noise.sigmas
    return -0.5 * float(np.sum(z * z))


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def write_obs_noise(path, noise: ObsNoise) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# lambda = {noise.lam!r}, sigma_floor = {noise.sigma_floor!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["station_index", "sigma_ux", "sigma_uy"])
        for j, (sx, sy) in enumerate(noise.sigmas):
            writer.writerow([j, repr(float(sx)), repr(float(sy))])


def read_obs_noise(path) -> ObsNoise:
    lam = None
    floor = None
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line.lstrip("# ").strip().split(",")
                for part in parts:
                    k, _, v = part.partition("=")
                    if k.strip() == "lambda":
                        lam = float(v)
                    elif k.strip() == "sigma_floor":
                        floor = float(v)
                continue
            rows.append(line.strip())
    if lam is None or floor is None:
        raise ValueError("missing lambda/sigma_floor header comment")
    reader = csv.reader(rows)
    header = next(reader)
    if header != ["station_index", "sigma_ux", "sigma_uy"]:
        raise ValueError("unexpected obs-noise CSV header")
    sigmas = np.array([[float(r[1]), float(r[2])] for r in reader])
    return ObsNoise(sigmas, lam, floor)


def append_observation_log(
    path,
    step: int,
    time: float,
    stations: StationSet,
    obs: Observation,
    clean: np.ndarray,
    write_header: bool = False,
) -> None:
    mode = "w" if write_header else "a"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(
                ["step", "time", "station_index", "station_x", "station_y",
                 "obs_ux", "obs_uy", "true_ux", "true_uy"]
            )
        for j, (x, y) in enumerate(stations.coords):
            writer.writerow(
                [step, repr(float(time)), j, repr(float(x)), repr(float(y)),
                 repr(float(obs.values[j, 0])), repr(float(obs.values[j, 1])),
                 repr(float(clean[j, 0])), repr(float(clean[j, 1]))]
            )
