"""Experiment orchestration: twin (perfect-model) and imperfect-model runs.

A run is a pipeline of stages sharing one output directory:

    spinup -> calibrate-xi / calibrate-noise -> init-ensemble -> truth
           -> assimilate -> forecast / diagnose

Every stage reads only files written by earlier stages, so stages can be
re-run independently.  All randomness is keyed by (purpose, seed, window,
member), which makes full runs byte-deterministic for any worker count.
"""

from __future__ import annotations

import configparser
import csv
import json
import pickle
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as dgn
from . import dynamics as dyn
from . import ensembles as ensmod
from . import filtering as flt
from . import observations as obsmod
from . import stochastic as sto
from .fields import (
    Grid,
    ScalarField,
    coarse_grain,
    read_scalar,
    sample_at,
    velocity_from_vorticity,
    write_scalar,
)
from .rng import Tag, station_stream, stream

PROBE_POINTS = tuple(
    (x, y) for y in (0.25, 0.5, 0.75) for x in (0.25, 0.5, 0.75)
)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "perfect"
    fine_n: int = 128
    coarse_n: int = 32
    a: float = 0.1
    b: int = 8
    r: float = 0.01
    dt_fine: float = 0.0025
    dt_coarse: float = 0.02
    stations_s: int = 9
    lam: float = 0.6
    sigma_floor: float = 1e-6
    assimilation_interval: int = 5
    total_windows: int = 50
    seed: int = 1234
    spinup_time: float = 6.0
    xi_fraction: float = 0.5
    calibration_snapshots: int = 41
    pool_size: int = 10
    deformation_epsilon: float = 0.25
    deformation_steps: int = 104
    checkpoint_interval: int = 10
    trajectory_members: int = 15
    n_particles: int = 24
    ess_threshold_fraction: float = 0.8
    rho: float = 0.9995
    mcmc_steps: int = 5
    max_temperatures: int = 200
    bisection_iters: int = 60
    final_resample_always: bool = True

    def __post_init__(self):
        if self.scenario not in ("perfect", "imperfect"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.fine_n % self.coarse_n != 0:
            raise ValueError("fine_n must be a multiple of coarse_n")
        ratio = self.dt_coarse / self.dt_fine
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("dt_coarse must be an integer multiple of dt_fine")
        if self.assimilation_interval < 1:
            raise ValueError("assimilation_interval must be at least 1")
        if self.total_windows < 0:
            raise ValueError("total_windows must be nonnegative")

    @property
    def fine_grid(self) -> Grid:
        return Grid(self.fine_n)

    @property
    def coarse_grid(self) -> Grid:
        return Grid(self.coarse_n)

    @property
    def params_fine(self) -> dyn.ModelParams:
        return dyn.ModelParams(self.a, self.b, self.r, self.dt_fine)

    @property
    def params_coarse(self) -> dyn.ModelParams:
        return dyn.ModelParams(self.a, self.b, self.r, self.dt_coarse)

    @property
    def steps_per_snapshot(self) -> int:
        return int(round(self.dt_coarse / self.dt_fine))

    @property
    def window_time(self) -> float:
        return self.assimilation_interval * self.dt_coarse

    @property
    def filter_config(self) -> flt.FilterConfig:
        return flt.FilterConfig(
            n_particles=self.n_particles,
            ess_threshold_fraction=self.ess_threshold_fraction,
            rho=self.rho,
            mcmc_steps=self.mcmc_steps,
            max_temperatures=self.max_temperatures,
            bisection_iters=self.bisection_iters,
            final_resample_always=self.final_resample_always,
        )


_CONFIG_LAYOUT = {
    "model": {"a": float, "b": int, "r": float, "dt_fine": float, "dt_coarse": float},
    "grid": {"fine_n": int, "coarse_n": int},
    "filter": {
        "n_particles": int,
        "ess_threshold_fraction": float,
        "rho": float,
        "mcmc_steps": int,
        "max_temperatures": int,
        "bisection_iters": int,
        "final_resample_always": bool,
    },
    "observations": {"stations_s": int, "lambda": float, "sigma_floor": float},
    "experiment": {
        "scenario": str,
        "assimilation_interval": int,
        "total_windows": int,
        "seed": int,
        "spinup_time": float,
        "xi_fraction": float,
        "calibration_snapshots": int,
        "pool_size": int,
        "deformation_epsilon": float,
        "deformation_steps": int,
        "checkpoint_interval": int,
        "trajectory_members": int,
    },
}

_KEY_RENAMES = {"lambda": "lam"}


def parse_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Strict key = value parser; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        cp.read_file(fh)
    values: dict = {}
    for section in cp.sections():
        if section not in _CONFIG_LAYOUT:
            raise ValueError(f"unknown config section [{section}]")
        known = _CONFIG_LAYOUT[section]
        for key, raw in cp[section].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r} in section [{section}]")
            typ = known[key]
            if typ is bool:
                parsed = cp[section].getboolean(key)
            else:
                parsed = typ(raw)
            values[_KEY_RENAMES.get(key, key)] = parsed
    if seed_override is not None:
        values["seed"] = int(seed_override)
    return ExperimentConfig(**values)


def write_config(path, cfg: ExperimentConfig) -> None:
    cp = configparser.ConfigParser()
    d = asdict(cfg)
    for section, keys in _CONFIG_LAYOUT.items():
        cp[section] = {}
        for key in keys:
            attr = _KEY_RENAMES.get(key, key)
            cp[section][key] = str(d[attr])
    with open(path, "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# propagator and parallel runner
# ---------------------------------------------------------------------------

class SpdePropagator:
    """Filter-facing adapter around the stochastic coarse model."""

    def __init__(
        self,
        basis: sto.NoiseBasis,
        params: dyn.ModelParams,
        n_sub: int,
        stations: obsmod.StationSet,
        noise: obsmod.ObsNoise,
    ):
        self.basis = basis
        self.params = params
        self.n_sub = n_sub
        self.stations = stations
        self.noise = noise
        self._forcing = dyn.forcing_field(basis.grid, params.a, params.b)

    def propagate(self, parent: ScalarField, path: sto.PathIncrements) -> ScalarField:
        return sto.propagate_window(
            parent, path, self.basis, self.params, forcing=self._forcing
        )

    def fresh_path(self, rng) -> sto.PathIncrements:
        return sto.brownian_increments(rng, self.basis.m, self.n_sub, self.params.dt)

    def blend(self, a, b, rho):
        return sto.blend_paths(a, b, rho)

    def log_likelihood(self, state: ScalarField, y: obsmod.Observation) -> float:
        return obsmod.log_likelihood(state, y, self.stations, self.noise)


_WORKER_PROP = None


def _worker_init(blob: bytes) -> None:
    global _WORKER_PROP
    _WORKER_PROP = pickle.loads(blob)


def _worker_propagate(item):
    return flt.propagate_particle(_WORKER_PROP, *item)


def _worker_jitter(item):
    return flt.jitter_particle(_WORKER_PROP, *item)


class ProcessRunner:
    """Particle work fanned out to a process pool; results keep input order."""

    def __init__(self, prop, workers: int):
        self.workers = workers
        self._pool = ProcessPoolExecutor(
            max_workers=workers,
            initializer=_worker_init,
            initargs=(pickle.dumps(prop),),
        )

    def _chunk(self, n: int) -> int:
        return max(1, n // (4 * self.workers))

    def propagate(self, items):
        return list(self._pool.map(_worker_propagate, items, chunksize=self._chunk(len(items))))

    def jitter(self, items):
        return list(self._pool.map(_worker_jitter, items, chunksize=self._chunk(len(items))))

    def close(self) -> None:
        self._pool.shutdown()


def make_runner(prop, workers: int):
    if workers <= 1:
        return flt.SerialRunner(prop)
    return ProcessRunner(prop, workers)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def _spin_dir(out_dir) -> Path:
    return Path(out_dir) / "spinup"


def _calib_dir(out_dir) -> Path:
    return Path(out_dir) / "calibration"


def _truth_dir(out_dir) -> Path:
    return Path(out_dir) / "truth"


def _ensemble_dir(out_dir) -> Path:
    return Path(out_dir) / "ensemble"


def _assim_dir(out_dir) -> Path:
    return Path(out_dir) / "assimilate"


def run_spinup(cfg: ExperimentConfig, out_dir) -> dict:
    """Fine-grid spin-up; keeps the trailing snapshots for calibration/pool."""
    spin = _spin_dir(out_dir)
    spin.mkdir(parents=True, exist_ok=True)
    keep = max(cfg.calibration_snapshots, cfg.pool_size)
    omega, records, snapshots = dyn.spinup(
        cfg.fine_grid,
        cfg.params_fine,
        cfg.spinup_time,
        record_every=cfg.steps_per_snapshot,
        snapshot_every=cfg.steps_per_snapshot,
    )
    snapshots = snapshots[-keep:]
    with open(spin / "energy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time", "energy", "enstrophy"])
        for rec in records:
            writer.writerow(
                [rec.step, repr(rec.time), repr(rec.energy), repr(rec.enstrophy)]
            )
    for i, snap in enumerate(snapshots):
        write_scalar(spin / f"snap_{i:04d}.sfld", snap)
    write_scalar(spin / "final.sfld", omega)
    return {
        "snapshots": len(snapshots),
        "equilibrium": dyn.equilibrium_reached(records),
        "final_energy": records[-1].energy,
    }


def _load_snapshots(out_dir, count: int) -> list[ScalarField]:
    spin = _spin_dir(out_dir)
    paths = sorted(spin.glob("snap_????.sfld"))
    if len(paths) < count:
        raise FileNotFoundError(
            f"need {count} spin-up snapshots under {spin}, found {len(paths)}"
        )
    return [read_scalar(p) for p in paths[-count:]]


def run_calibrate_xi(cfg: ExperimentConfig, out_dir) -> dict:
    calib = _calib_dir(out_dir)
    calib.mkdir(parents=True, exist_ok=True)
    snaps = _load_snapshots(out_dir, cfg.calibration_snapshots)
    basis = sto.calibrate_xi(snaps, cfg.coarse_grid, cfg.params_coarse, cfg.xi_fraction)
    sto.write_noise_basis(calib / "basis.eof", basis)
    return {"modes": basis.m, "explained": float(np.sum(basis.spectrum))}


def run_calibrate_noise(cfg: ExperimentConfig, out_dir) -> dict:
    calib = _calib_dir(out_dir)
    calib.mkdir(parents=True, exist_ok=True)
    snaps = _load_snapshots(out_dir, cfg.calibration_snapshots)
    velocities = [velocity_from_vorticity(s) for s in snaps]
    stations = obsmod.make_stations(cfg.stations_s)
    noise = obsmod.calibrate_obs_noise(
        velocities, cfg.coarse_grid, stations, cfg.lam, cfg.sigma_floor
    )
    obsmod.write_obs_noise(calib / "obs_noise.csv", noise)
    return {"sigma_mean": float(noise.sigmas.mean()), "sigma_max": float(noise.sigmas.max())}


def run_init_ensemble(cfg: ExperimentConfig, out_dir) -> dict:
    pool = _load_snapshots(out_dir, cfg.pool_size)
    omega_truth = read_scalar(_spin_dir(out_dir) / "final.sfld")
    dconf = ensmod.DeformationConfig(
        pool=pool, epsilon=cfg.deformation_epsilon, n_steps=cfg.deformation_steps
    )
    members, records = ensmod.sample_initial_ensemble(
        dconf, cfg.n_particles, (cfg.seed,), cfg.params_fine, cfg.coarse_grid, omega_truth
    )
    ensmod.save_ensemble(_ensemble_dir(out_dir), members, records)
    return {"members": len(members)}


def run_truth(cfg: ExperimentConfig, out_dir) -> dict:
    """Store the verification states: coarse vorticity at window boundaries."""
    truth_dir = _truth_dir(out_dir)
    truth_dir.mkdir(parents=True, exist_ok=True)
    omega_fine = read_scalar(_spin_dir(out_dir) / "final.sfld")

    if cfg.scenario == "imperfect":
        write_scalar(truth_dir / "truth_0000.sfld", coarse_grain(omega_fine, cfg.coarse_grid))
        params = cfg.params_fine
        forcing = dyn.forcing_field(cfg.fine_grid, cfg.a, cfg.b)
        steps_per_window = cfg.assimilation_interval * cfg.steps_per_snapshot
        state = omega_fine
        for w in range(1, cfg.total_windows + 1):
            for _ in range(steps_per_window):
                state = dyn.ssprk3_step(state, params, forcing=forcing)
            write_scalar(
                truth_dir / f"truth_{w:04d}.sfld", coarse_grain(state, cfg.coarse_grid)
            )
        return {"windows": cfg.total_windows, "source": "fine deterministic run"}

    basis = sto.read_noise_basis(_calib_dir(out_dir) / "basis.eof")
    pool = _load_snapshots(out_dir, cfg.pool_size)
    r = stream(int(Tag.TRUTH), cfg.seed, 0)
    pool_index = int(r.integers(len(pool)))
    beta = float(r.normal(0.0, np.sqrt(cfg.deformation_epsilon)))
    u_sample = velocity_from_vorticity(pool[pool_index])
    q = ensmod.deform(
        omega_fine, u_sample, beta, cfg.deformation_steps, cfg.params_fine, cfg.coarse_grid
    )
    write_scalar(truth_dir / "truth_0000.sfld", q)
    forcing = dyn.forcing_field(cfg.coarse_grid, cfg.a, cfg.b)
    for w in range(1, cfg.total_windows + 1):
        path = sto.brownian_increments(
            stream(int(Tag.TRUTH), cfg.seed, w),
            basis.m,
            cfg.assimilation_interval,
            cfg.dt_coarse,
        )
        q = sto.propagate_window(q, path, basis, cfg.params_coarse, forcing=forcing)
        write_scalar(truth_dir / f"truth_{w:04d}.sfld", q)
    return {"windows": cfg.total_windows, "source": "stochastic coarse realization"}


def load_truth(out_dir, window: int) -> ScalarField:
    return read_scalar(_truth_dir(out_dir) / f"truth_{window:04d}.sfld")


# ---------------------------------------------------------------------------
# assimilation
# ---------------------------------------------------------------------------

def _probe_sigma(noise: obsmod.ObsNoise, stations: obsmod.StationSet, point) -> np.ndarray:
    """Observation sigma at a probe, bilinear on the station lattice."""
    s = stations.s
    grid_sig = noise.sigmas.reshape(s, s, 2)
    x, y = point
    fx = x * (s - 1)
    fy = y * (s - 1)
    ix = min(int(np.floor(fx)), s - 2)
    iy = min(int(np.floor(fy)), s - 2)
    ax, ay = fx - ix, fy - iy
    return (
        (1 - ay) * ((1 - ax) * grid_sig[iy, ix] + ax * grid_sig[iy, ix + 1])
        + ay * ((1 - ax) * grid_sig[iy + 1, ix] + ax * grid_sig[iy + 1, ix + 1])
    )


def _probe_label(point) -> str:
    return f"{point[0]:g}_{point[1]:g}"


@dataclass
class _RunState:
    """Mutable accumulation of one assimilation run."""

    particles: list
    prior_members: list[ScalarField]
    diag_records: list = field(default_factory=list)
    step_rows: list = field(default_factory=list)
    temp_rows: list = field(default_factory=list)       # one row per temperature
    rank_rows: dict = field(default_factory=dict)       # probe label -> rows
    trajectory_rows: dict = field(default_factory=dict)  # probe label -> rows
    obs_rows: list = field(default_factory=list)
    next_window: int = 1


def _serialize_records(state: _RunState) -> dict:
    return {
        "diag": [rec.row() for rec in state.diag_records],
        "steps": state.step_rows,
        "temps": state.temp_rows,
        "ranks": state.rank_rows,
        "traj": state.trajectory_rows,
        "obs": state.obs_rows,
        "next_window": state.next_window,
    }


def _restore_records(state: _RunState, blob: dict) -> None:
    state.step_rows = blob["steps"]
    state.temp_rows = blob["temps"]
    state.rank_rows = blob["ranks"]
    state.trajectory_rows = blob["traj"]
    state.obs_rows = blob["obs"]
    state.next_window = blob["next_window"]
    state.diag_records = [
        dgn.DiagnosticsRecord(
            step=int(row[0]), time=float(row[1]), rmse_posterior=float(row[2]),
            rmse_forecast=float(row[3]), rmse_forecast_vs_noisyobs=float(row[4]),
            rmse_prior=float(row[5]), spread_posterior=float(row[6]),
            spread_forecast=float(row[7]), spread_prior=float(row[8]),
            ess=float(row[9]), n_temperatures=int(row[10]),
            propagator_evals=int(row[11]),
        )
        for row in blob["diag"]
    ]


def run_assimilation(
    cfg: ExperimentConfig, out_dir, workers: int = 1, resume: bool = False
) -> list[dgn.DiagnosticsRecord]:
    """The assimilation loop; writes every CSV output and periodic checkpoints."""
    out_dir = Path(out_dir)
    assim = _assim_dir(out_dir)
    assim.mkdir(parents=True, exist_ok=True)
    stations = obsmod.make_stations(cfg.stations_s)
    noise = obsmod.read_obs_noise(_calib_dir(out_dir) / "obs_noise.csv")
    basis = sto.read_noise_basis(_calib_dir(out_dir) / "basis.eof")
    prop = SpdePropagator(
        basis, cfg.params_coarse, cfg.assimilation_interval, stations, noise
    )
    fcfg = cfg.filter_config
    n = cfg.n_particles
    n_traj = min(cfg.trajectory_members, n)

    if resume:
        ck = sorted(assim.glob("checkpoints/window_????"))
        if not ck:
            raise FileNotFoundError("resume requested but no checkpoint exists")
        window0, states, prior_members = ensmod.load_assimilation_checkpoint(ck[-1])
        particles = [flt.Particle(s, None, s, 0.0) for s in states]
        state = _RunState(particles, prior_members)
        _restore_records(state, json.loads((ck[-1] / "records.json").read_text()))
    else:
        members = ensmod.load_ensemble(_ensemble_dir(out_dir))
        if len(members) != n:
            raise ValueError(
                f"initial ensemble has {len(members)} members, config wants {n}"
            )
        particles = [flt.Particle(m, None, m, 0.0) for m in members]
        state = _RunState(particles, list(members))
        _initial_diagnostics(cfg, out_dir, state, stations, noise)

    runner = make_runner(prop, workers)
    try:
        for w in range(state.next_window, cfg.total_windows + 1):
            _assimilate_window(cfg, out_dir, state, w, prop, fcfg, runner, stations, noise, n_traj)
            if cfg.checkpoint_interval and (
                w % cfg.checkpoint_interval == 0 or w == cfg.total_windows
            ):
                _write_checkpoint(assim, w, state)
    finally:
        if hasattr(runner, "close"):
            runner.close()

    _write_outputs(cfg, out_dir, state, stations)
    _write_metadata(cfg, out_dir, basis, workers)
    return state.diag_records


def _initial_diagnostics(cfg, out_dir, state, stations, noise) -> None:
    truth_vel = velocity_from_vorticity(load_truth(out_dir, 0))
    member_vels = [velocity_from_vorticity(p.state) for p in state.particles]
    mean_vel = dgn.ensemble_mean(member_vels)
    r0 = dgn.rmse(mean_vel, truth_vel)
    s0 = dgn.spread(member_vels) if len(member_vels) > 1 else 0.0
    state.diag_records.append(
        dgn.DiagnosticsRecord(
            step=0, time=0.0, rmse_posterior=r0, rmse_forecast=r0,
            rmse_forecast_vs_noisyobs=float("nan"), rmse_prior=r0,
            spread_posterior=s0, spread_forecast=s0, spread_prior=s0,
            ess=float(len(member_vels)), n_temperatures=0, propagator_evals=0,
        )
    )


def _assimilate_window(
    cfg, out_dir, state, w, prop, fcfg, runner, stations, noise, n_traj
) -> None:
    t = w * cfg.window_time
    truth_vel = velocity_from_vorticity(load_truth(out_dir, w))
    clean = sample_at(truth_vel, stations.coords)
    y = obsmod.observe(truth_vel, stations, noise, key=(cfg.seed, w), step=w)

    state.particles, sdiag = flt.assimilate_step(
        state.particles, y, prop, fcfg, key=(cfg.seed, w), runner=runner
    )

    for i, member in enumerate(state.prior_members):
        path = prop.fresh_path(stream(int(Tag.PRIOR), cfg.seed, w, i))
        state.prior_members[i] = prop.propagate(member, path)

    forecast_vels = [velocity_from_vorticity(s) for s in sdiag.forecast_states]
    posterior_vels = [velocity_from_vorticity(p.state) for p in state.particles]
    prior_vels = [velocity_from_vorticity(m) for m in state.prior_members]
    forecast_mean = dgn.ensemble_mean(forecast_vels)
    posterior_mean = dgn.ensemble_mean(posterior_vels)
    prior_mean = dgn.ensemble_mean(prior_vels)

    fc_at_stations = sample_at(forecast_mean, stations.coords)
    rmse_noisy = float(np.sqrt(np.mean((fc_at_stations - y.values) ** 2)))
    many = len(posterior_vels) > 1
    record = dgn.DiagnosticsRecord(
        step=w,
        time=t,
        rmse_posterior=dgn.rmse(posterior_mean, truth_vel),
        rmse_forecast=dgn.rmse(forecast_mean, truth_vel),
        rmse_forecast_vs_noisyobs=rmse_noisy,
        rmse_prior=dgn.rmse(prior_mean, truth_vel),
        spread_posterior=dgn.spread(posterior_vels) if many else 0.0,
        spread_forecast=dgn.spread(forecast_vels) if many else 0.0,
        spread_prior=dgn.spread(prior_vels) if many else 0.0,
        ess=sdiag.ess_final,
        n_temperatures=sdiag.n_temperatures,
        propagator_evals=sdiag.propagator_evals,
    )
    state.diag_records.append(record)

    phi_list = ";".join(repr(p) for p in sdiag.temperatures)
    state.step_rows.append(
        [str(w), repr(t), str(sdiag.n_temperatures), phi_list,
         repr(sdiag.ess_final), str(sdiag.n_duplicates_jittered),
         repr(sdiag.jitter_accept_rate), str(sdiag.propagator_evals)]
    )
    for r_idx, (phi_r, ess_r) in enumerate(
        zip(sdiag.temperatures, sdiag.ess_per_temperature), start=1
    ):
        state.temp_rows.append([str(w), str(r_idx), repr(phi_r), repr(ess_r)])

    for j, (sx, sy) in enumerate(stations.coords):
        state.obs_rows.append(
            [str(w), repr(t), str(j), repr(float(sx)), repr(float(sy)),
             repr(float(y.values[j, 0])), repr(float(y.values[j, 1])),
             repr(float(clean[j, 0])), repr(float(clean[j, 1]))]
        )

    for point in PROBE_POINTS:
        label = _probe_label(point)
        sigma = _probe_sigma(noise, stations, point)
        truth_uv = sample_at(truth_vel, [point])[0]
        obs_draw = station_stream(
            (int(Tag.OBSERVE), cfg.seed, w), point[0], point[1]
        ).standard_normal(2)
        noisy_uv = truth_uv + sigma * obs_draw

        fc_members = np.array([sample_at(v, [point])[0] for v in forecast_vels])
        dressing = np.array([
            station_stream((int(Tag.RANK), cfg.seed, w, i), point[0], point[1]).standard_normal(2)
            for i in range(len(forecast_vels))
        ])
        dressed_ux = fc_members[:, 0] + sigma[0] * dressing[:, 0]
        rank_value = dgn.rank(noisy_uv[0], dressed_ux)
        state.rank_rows.setdefault(label, []).append([str(w), str(rank_value)])

        post_members = [sample_at(v, [point])[0][0] for v in posterior_vels[:n_traj]]
        row = [str(w), repr(float(truth_uv[0])), repr(float(noisy_uv[0])),
               repr(float(sample_at(posterior_mean, [point])[0][0])),
               repr(float(sample_at(prior_mean, [point])[0][0]))]
        row.extend(repr(float(v)) for v in post_members)
        state.trajectory_rows.setdefault(label, []).append(row)

    state.next_window = w + 1


def _write_checkpoint(assim: Path, window: int, state: _RunState) -> None:
    ck = assim / "checkpoints" / f"window_{window:04d}"
    ensmod.save_assimilation_checkpoint(ck, window, state.particles, state.prior_members)
    (ck / "records.json").write_text(json.dumps(_serialize_records(state)))


def _write_outputs(cfg, out_dir, state: _RunState, stations) -> None:
    assim = _assim_dir(out_dir)
    dgn.write_diagnostics_csv(assim / "diagnostics.csv", state.diag_records)

    with open(assim / "step_diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "time", "n_temperatures", "phi_list", "ess_final",
             "n_resampled_duplicates", "jitter_accept_rate", "propagator_evals"]
        )
        writer.writerows(state.step_rows)

    with open(assim / "temperatures.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "temperature_index", "phi", "ess"])
        writer.writerows(state.temp_rows)

    with open(assim / "observations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "time", "station_index", "station_x", "station_y",
             "obs_ux", "obs_uy", "true_ux", "true_uy"]
        )
        writer.writerows(state.obs_rows)

    n_traj = min(cfg.trajectory_members, cfg.n_particles)
    member_cols = [f"member_{i}" for i in range(n_traj)]
    for label, rows in state.trajectory_rows.items():
        with open(assim / f"trajectory_{label}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "truth", "truth_plus_noise", "posterior_mean", "prior_mean"]
                + member_cols
            )
            writer.writerows(rows)
    for label, rows in state.rank_rows.items():
        with open(assim / f"ranks_{label}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "rank"])
            writer.writerows(rows)


def _write_metadata(cfg, out_dir, basis, workers) -> None:
    spin_final = read_scalar(_spin_dir(out_dir) / "final.sfld")
    speed = dgn.mean_speed(velocity_from_vorticity(spin_final))
    meta = {
        "scenario": cfg.scenario,
        "fine_cells": cfg.fine_n,
        "coarse_cells": cfg.coarse_n,
        "fine_node_dof": (cfg.fine_n + 1) ** 2,
        "coarse_node_dof": (cfg.coarse_n + 1) ** 2,
        "noise_modes": basis.m,
        "zeta_scaling": "eigvec * sqrt(eigenvalue / dt_coarse)",
        "observation_dimension": 2 * cfg.stations_s ** 2,
        "stations": cfg.stations_s ** 2,
        "eddy_turnover_time": dgn.eddy_turnover_time(speed, 0.5),
        "window_time": cfg.window_time,
        "workers": workers,
        "seed": cfg.seed,
    }
    with open(_assim_dir(out_dir) / "run_metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# forecast and diagnosis
# ---------------------------------------------------------------------------

def run_forecast(cfg: ExperimentConfig, out_dir, start_window: int, j_max: int) -> list:
    """Free forecast from the checkpointed posterior at start_window."""
    assim = _assim_dir(out_dir)
    ck = assim / "checkpoints" / f"window_{start_window:04d}"
    if not ck.exists():
        raise FileNotFoundError(f"no checkpoint for window {start_window}")
    _, states, _ = ensmod.load_assimilation_checkpoint(ck)
    stations = obsmod.make_stations(cfg.stations_s)
    noise = obsmod.read_obs_noise(_calib_dir(out_dir) / "obs_noise.csv")
    basis = sto.read_noise_basis(_calib_dir(out_dir) / "basis.eof")
    prop = SpdePropagator(
        basis, cfg.params_coarse, cfg.assimilation_interval, stations, noise
    )
    truth_fields = [
        velocity_from_vorticity(load_truth(out_dir, start_window + j))
        for j in range(1, j_max + 1)
    ]
    curves = dgn.forecast_reliability(
        states, prop, truth_fields, j_max, (cfg.seed, start_window)
    )
    dgn.write_forecast_csv(assim / f"forecast_{start_window}.csv", curves)
    return curves


def run_diagnose(cfg: ExperimentConfig, out_dir) -> dict:
    """Summary of a finished run: rmse ordering, ESS floor, rank chi-square."""
    assim = _assim_dir(out_dir)
    rows = dgn.read_diagnostics_csv(assim / "diagnostics.csv")
    body = [r for r in rows if r["step"] >= 1]
    after5 = [r for r in body if r["step"] > 5]
    wins = sum(1 for r in after5 if r["rmse_posterior"] < r["rmse_prior"])
    summary = {
        "windows": len(body),
        "posterior_beats_prior_after_window5": (
            wins / len(after5) if after5 else float("nan")
        ),
        "final_rmse_posterior": body[-1]["rmse_posterior"] if body else float("nan"),
        "min_ess": min((r["ess"] for r in body), default=float("nan")),
    }
    ranks_summary = {}
    n = cfg.n_particles
    for path in sorted(assim.glob("ranks_*.csv")):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            ranks = [int(r["rank"]) for r in reader]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, chi2, rejected = dgn.rank_histogram_chi2(ranks, n)
        ranks_summary[path.stem] = {"chi2": chi2, "rejected": bool(rejected)}
    summary["rank_histograms"] = ranks_summary
    return summary


def run_kalman_check(n_particles: int = 10_000, steps: int = 20, seed: int = 20) -> dict:
    """Linear-Gaussian benchmark of the full filter against the exact recursion."""
    import math

    model = flt.LinearGaussianModel(a=0.92, q_var=0.25, h=1.0, r_var=0.4, m0=0.3, p0=0.8)
    prop = flt.LinearGaussianPropagator(model)
    truth_rng = stream(seed)
    ys = []
    x = model.m0 + math.sqrt(model.p0) * truth_rng.standard_normal()
    for _ in range(steps):
        x = model.a * x + math.sqrt(model.q_var) * truth_rng.standard_normal()
        ys.append(model.h * x + math.sqrt(model.r_var) * truth_rng.standard_normal())
    kalman = flt.kalman_filter(model, ys)
    cfg = flt.FilterConfig(n_particles=n_particles)
    init_rng = stream(seed + 1)
    ens = [
        flt.Particle(s, None, s, 0.0)
        for s in model.m0 + math.sqrt(model.p0) * init_rng.standard_normal(n_particles)
    ]
    worst_z = 0.0
    worst_var = 0.0
    n_eff = n_particles / 4  # resampling-correlation corrected sample count
    for w, y in enumerate(ys):
        ens, _ = flt.assimilate_step(ens, y, prop, cfg, key=(seed + 2, w))
        states = np.array([p.state for p in ens])
        k_mean, k_var = kalman[w]
        worst_z = max(worst_z, abs(states.mean() - k_mean) / math.sqrt(k_var / n_eff))
        worst_var = max(worst_var, abs(states.var(ddof=1) - k_var) / k_var)
    return {
        "worst_mean_z": worst_z,
        "worst_var_rel": worst_var,
        "mean_ok": worst_z <= 3.0,
        "var_ok": worst_var <= 0.10,
    }
