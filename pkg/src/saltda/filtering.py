"""Particle filter with adaptive tempering and MCMC jittering.

The engine is written against an abstract propagator (propagate / fresh_path /
blend / log_likelihood), so the coarse stochastic fluid model and a 1-D
linear-Gaussian toy plug into the same code path.  All weight arithmetic is
carried in log space with max subtraction.

Cost accounting follows the convention of one ensemble sweep per accepted
temperature plus one propagator evaluation per MCMC proposal, so the reported
`propagator_evals` per window is exactly
``n_temperatures * N + mcmc_steps * n_duplicates_jittered``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Protocol, Sequence

import numpy as np

from .rng import RngKey, Tag, stream


class DegenerateEnsembleError(RuntimeError):
    """All particles carry vanishing likelihood; the ensemble lost the signal."""


class Propagator(Protocol):
    def propagate(self, parent: Any, path: Any) -> Any: ...

    def fresh_path(self, rng: np.random.Generator) -> Any: ...

    def blend(self, path_a: Any, path_b: Any, rho: float) -> Any: ...

    def log_likelihood(self, state: Any, y: Any) -> float: ...


@dataclass
class Particle:
    """Parent state, driving path over the window, resulting state, weights."""

    parent: Any
    path: Any
    state: Any
    loglike: float
    log_weight: float = 0.0


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 100
    ess_threshold_fraction: float = 0.8
    rho: float = 0.9995
    mcmc_steps: int = 5
    max_temperatures: int = 200
    bisection_iters: int = 60
    final_resample_always: bool = True

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if not 0.0 < self.ess_threshold_fraction <= 1.0:
            raise ValueError("ess threshold fraction must lie in (0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.mcmc_steps < 0 or self.max_temperatures < 1 or self.bisection_iters < 1:
            raise ValueError("invalid filter configuration")


@dataclass
class StepDiagnostics:
    temperatures: list[float] = field(default_factory=list)
    ess_per_temperature: list[float] = field(default_factory=list)
    n_duplicates_jittered: int = 0
    jitter_accepts: int = 0
    jitter_attempts: int = 0
    propagator_evals: int = 0
    forecast_states: list[Any] = field(default_factory=list)

    @property
    def n_temperatures(self) -> int:
        return len(self.temperatures)

    @property
    def ess_final(self) -> float:
        return self.ess_per_temperature[-1] if self.ess_per_temperature else float("nan")

    @property
    def jitter_accept_rate(self) -> float:
        if self.jitter_attempts == 0:
            return float("nan")
        return self.jitter_accepts / self.jitter_attempts


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def normalize_logweights(logw: Sequence[float]) -> np.ndarray:
    """Stable softmax of log weights; tolerates -inf entries."""
    logw = np.asarray(logw, dtype=np.float64)
    if np.any(np.isnan(logw)) or np.any(logw == np.inf):
        raise ValueError("log weights must be finite or -inf")
    top = np.max(logw)
    if top == -np.inf:
        raise DegenerateEnsembleError("all log weights are -inf")
    w = np.exp(logw - top)
    return w / w.sum()


def ess(weights: Sequence[float]) -> float:
    """Effective sample size 1 / sum(w^2) of normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights are not normalized")
    return 1.0 / float(np.sum(w * w))


def find_next_temperature(
    loglikes: Sequence[float],
    phi_prev: float,
    threshold: float,
    bisection_iters: int = 60,
) -> float:
    """Largest temperature in (phi_prev, 1] whose incremental ESS meets the threshold.

    The incremental ESS is non-increasing in the temperature, so bisection
    keeps the lower endpoint feasible; the endpoint 1 is returned outright
    when it already satisfies the threshold.
    """
    loglikes = np.asarray(loglikes, dtype=np.float64)
    if threshold > loglikes.size:
        raise ValueError("threshold exceeds the ensemble size")
    if not 0.0 <= phi_prev < 1.0:
        raise ValueError("phi_prev must lie in [0, 1)")

    def incremental_ess(phi: float) -> float:
        return ess(normalize_logweights((phi - phi_prev) * loglikes))

    if incremental_ess(1.0) >= threshold:
        return 1.0
    lo, hi = phi_prev, 1.0
    for _ in range(bisection_iters):
        mid = 0.5 * (lo + hi)
        if incremental_ess(mid) >= threshold:
            lo = mid
        else:
            hi = mid
    return lo


def resample_systematic(weights: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling; returns ascending parent indices."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights are not normalized")
    u = rng.uniform(0.0, 1.0 / n)
    positions = u + np.arange(n) / n
    idx = np.searchsorted(np.cumsum(w), positions, side="right")
    return np.minimum(idx, n - 1)


# ---------------------------------------------------------------------------
# jittering
# ---------------------------------------------------------------------------

def jitter(
    particle: Particle,
    prop: Propagator,
    y: Any,
    phi: float,
    cfg: FilterConfig,
    rng: np.random.Generator,
) -> tuple[Particle, int]:
    """Metropolis moves along blended driving paths, re-propagated from the parent.

    The acceptance ratio is the likelihood ratio raised to the current
    temperature; the parent state is never modified.  Returns the moved
    particle and the number of accepted proposals.
    """
    current = particle
    accepts = 0
    for _ in range(cfg.mcmc_steps):
        z = prop.fresh_path(rng)
        proposal_path = prop.blend(current.path, z, cfg.rho)
        v = prop.propagate(current.parent, proposal_path)
        ll_v = prop.log_likelihood(v, y)
        ll_u = current.loglike
        u = rng.uniform()  # drawn unconditionally to keep the stream aligned
        log_u = math.log(u) if u > 0.0 else -np.inf
        if ll_v == -np.inf:
            accept = False
        elif ll_u == -np.inf:
            accept = True
        else:
            accept = log_u < phi * (ll_v - ll_u)
        if accept:
            current = replace(
                current, path=proposal_path, state=v, loglike=ll_v
            )
            accepts += 1
    return current, accepts


# ---------------------------------------------------------------------------
# one assimilation step
# ---------------------------------------------------------------------------

def propagate_particle(prop: Propagator, parent: Any, key: RngKey, y: Any) -> Particle:
    path = prop.fresh_path(stream(*key))
    state = prop.propagate(parent, path)
    return Particle(parent, path, state, prop.log_likelihood(state, y))


def jitter_particle(
    prop: Propagator, particle: Particle, y: Any, phi: float, cfg: FilterConfig, key: RngKey
) -> tuple[Particle, int]:
    return jitter(particle, prop, y, phi, cfg, stream(*key))


class SerialRunner:
    """In-process execution of the per-particle work items."""

    def __init__(self, prop: Propagator):
        self.prop = prop

    def propagate(self, items):
        return [propagate_particle(self.prop, *it) for it in items]

    def jitter(self, items):
        return [jitter_particle(self.prop, *it) for it in items]


def assimilate_step(
    ensemble: list[Particle],
    y: Any,
    prop: Propagator,
    cfg: FilterConfig,
    key: RngKey,
    runner=None,
) -> tuple[list[Particle], StepDiagnostics]:
    """One filtering step: forecast, adaptive tempering, resampling, jittering.

    `key` must identify the assimilation window, e.g. (seed, window_index);
    every random draw inside is keyed off it, so results do not depend on the
    execution schedule.
    """
    n = len(ensemble)
    if n == 0:
        raise ValueError("empty ensemble")
    key = tuple(int(k) for k in key)
    if runner is None:
        runner = SerialRunner(prop)
    threshold = cfg.ess_threshold_fraction * n
    diag = StepDiagnostics()

    items = [(p.state, (int(Tag.PATH), *key, i), y) for i, p in enumerate(ensemble)]
    particles = runner.propagate(items)
    diag.forecast_states = [p.state for p in particles]

    phi = 0.0
    for r in range(1, cfg.max_temperatures + 1):
        loglikes = np.array([p.loglike for p in particles])
        if np.max(loglikes) == -np.inf:
            raise DegenerateEnsembleError(
                f"window key {key}: every particle has -inf log-likelihood at "
                f"temperature index {r} (phi={phi})"
            )
        full_ess = ess(normalize_logweights((1.0 - phi) * loglikes))
        if full_ess >= threshold:
            phi_r = 1.0
        else:
            phi_r = find_next_temperature(loglikes, phi, threshold, cfg.bisection_iters)
        if phi_r <= phi:
            raise RuntimeError(
                f"tempering stalled at phi={phi} (threshold {threshold}); "
                "likelihoods are too singular for this ensemble"
            )
        weights = normalize_logweights((phi_r - phi) * loglikes)
        diag.temperatures.append(phi_r)
        diag.ess_per_temperature.append(ess(weights))
        diag.propagator_evals += n
        is_final = phi_r == 1.0

        if is_final and not cfg.final_resample_always and full_ess >= threshold and r == 1:
            # bootstrap-style step: healthy weights are kept, no resampling
            logw = np.log(weights)
            particles = [
                replace(p, log_weight=float(lw)) for p, lw in zip(particles, logw)
            ]
            return particles, diag

        idx = resample_systematic(weights, stream(int(Tag.RESAMPLE), *key, r))
        counts = np.bincount(idx, minlength=n)
        duplicated = counts[idx] > 1
        particles = [replace(particles[i], log_weight=0.0) for i in idx]

        jitter_slots = np.nonzero(duplicated)[0]
        if jitter_slots.size and cfg.mcmc_steps > 0:
            jitems = [
                (particles[j], y, phi_r, cfg, (int(Tag.JITTER), *key, r, int(j)))
                for j in jitter_slots
            ]
            results = runner.jitter(jitems)
            for j, (moved, accepted) in zip(jitter_slots, results):
                particles[j] = moved
                diag.jitter_accepts += accepted
            diag.n_duplicates_jittered += int(jitter_slots.size)
            diag.jitter_attempts += int(jitter_slots.size) * cfg.mcmc_steps
            diag.propagator_evals += int(jitter_slots.size) * cfg.mcmc_steps

        phi = phi_r
        if is_final:
            return particles, diag

    raise RuntimeError(
        f"tempering did not reach phi=1 within {cfg.max_temperatures} temperatures"
    )


# ---------------------------------------------------------------------------
# linear-Gaussian toy model and Kalman oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearGaussianModel:
    a: float
    q_var: float
    h: float
    r_var: float
    m0: float
    p0: float

    def __post_init__(self):
        if self.q_var <= 0 or self.r_var <= 0:
            raise ValueError("variances must be positive")
        if self.p0 < 0:
            raise ValueError("initial variance must be nonnegative")


class LinearGaussianPropagator:
    """Scalar AR(1) signal with additive Gaussian noise; paths are the draws."""

    def __init__(self, model: LinearGaussianModel):
        self.model = model

    def propagate(self, parent: float, path: float) -> float:
        return self.model.a * parent + path

    def fresh_path(self, rng: np.random.Generator) -> float:
        return float(rng.normal(0.0, math.sqrt(self.model.q_var)))

    def blend(self, path_a: float, path_b: float, rho: float) -> float:
        if rho == 1.0:
            return path_a
        if rho == 0.0:
            return path_b
        return rho * path_a + math.sqrt(1.0 - rho * rho) * path_b

    def log_likelihood(self, state: float, y: float) -> float:
        z = (y - self.model.h * state)
        return -0.5 * z * z / self.model.r_var


def kalman_filter(
    model: LinearGaussianModel, observations: Sequence[float]
) -> list[tuple[float, float]]:
    """Exact scalar predict/update recursion; the filter's validation oracle."""
    m, p = model.m0, model.p0
    out = []
    for y in observations:
        m = model.a * m
        p = model.a * model.a * p + model.q_var
        s = model.h * model.h * p + model.r_var
        gain = p * model.h / s
        m = m + gain * (y - model.h * m)
        p = (1.0 - gain * model.h) * p
        out.append((m, p))
    return out
