"""Verification statistics: rmse, spread, rank histograms, turnover time.

Field norms use the trapezoid rule (half-weights on boundary nodes), so a
constant field of value c has norm exactly c on the unit square and the
numbers are resolution-independent.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .fields import Grid, VectorField, velocity_from_vorticity
from .rng import RngKey, Tag, stream


def _trapezoid_weights(grid: Grid) -> np.ndarray:
    t = np.full(grid.nodes, grid.h)
    t[0] *= 0.5
    t[-1] *= 0.5
    return np.outer(t, t)


_WEIGHT_CACHE: dict[int, np.ndarray] = {}


def _weights(grid: Grid) -> np.ndarray:
    w = _WEIGHT_CACHE.get(grid.n)
    if w is None:
        w = _trapezoid_weights(grid)
        _WEIGHT_CACHE[grid.n] = w
    return w


def field_norm(u: VectorField) -> float:
    """Discrete L2 norm of a velocity field."""
    w = _weights(u.grid)
    return float(np.sqrt(np.sum(w * (u.x.values ** 2 + u.y.values ** 2))))


def rmse(mean_field: VectorField, verification: VectorField) -> float:
    """L2 distance between an ensemble-mean velocity and a verification."""
    if mean_field.grid != verification.grid:
        raise ValueError("fields live on different grids")
    w = _weights(mean_field.grid)
    dx = mean_field.x.values - verification.x.values
    dy = mean_field.y.values - verification.y.values
    return float(np.sqrt(np.sum(w * (dx * dx + dy * dy))))


def ensemble_mean(members: list[VectorField]) -> VectorField:
    from .fields import ScalarField

    grid = members[0].grid
    mx = np.mean([m.x.values for m in members], axis=0)
    my = np.mean([m.y.values for m in members], axis=0)
    return VectorField(ScalarField(grid, mx), ScalarField(grid, my))


def spread(members: list[VectorField]) -> float:
    """sqrt(1/(N-1) * sum_n ||X_n - mean||^2) with the same field norm."""
    n = len(members)
    if n < 2:
        raise ValueError("spread needs at least two members")
    mean = ensemble_mean(members)
    w = _weights(members[0].grid)
    total = 0.0
    for m in members:
        dx = m.x.values - mean.x.values
        dy = m.y.values - mean.y.values
        total += float(np.sum(w * (dx * dx + dy * dy)))
    return float(np.sqrt(total / (n - 1)))


def mean_speed(u: VectorField) -> float:
    """Domain average of the pointwise speed (L1 norm of the velocity)."""
    w = _weights(u.grid)
    return float(np.sum(w * np.hypot(u.x.values, u.y.values)))


def eddy_turnover_time(speed: float, l: float = 0.5) -> float:
    """Advective time scale l / |u|."""
    if speed <= 0:
        raise ValueError("mean speed must be positive")
    if l < 0:
        raise ValueError("length scale must be nonnegative")
    return l / speed


def rank(y_value: float, ensemble_values, rng: np.random.Generator | None = None) -> int:
    """Position of the verification among the sorted ensemble values.

    Counting is inclusive (values equal to y count below it); when several
    ensemble values tie with y exactly, the rank is drawn uniformly over the
    tied inclusive positions.
    """
    vals = np.asarray(ensemble_values, dtype=np.float64)
    below = int(np.count_nonzero(vals < y_value))
    equal = int(np.count_nonzero(vals == y_value))
    if equal <= 1:
        return below + equal
    if rng is None:
        rng = np.random.default_rng()
    return below + 1 + int(rng.integers(equal))


def rank_histogram_chi2(ranks, n_members: int) -> tuple[np.ndarray, float, bool]:
    """Bin counts, Pearson statistic and the 1%-level rejection flag.

    The statistic is compared against the chi-square critical value with
    n_members degrees of freedom (bins minus one).
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    bins = n_members + 1
    if ranks.size < 10 * bins:
        warnings.warn(
            f"only {ranks.size} rank samples for {bins} bins; the chi-square "
            "comparison is unreliable",
            stacklevel=2,
        )
    counts = np.bincount(ranks, minlength=bins)
    if counts.size > bins:
        raise ValueError("rank values exceed the ensemble size")
    expected = ranks.size / bins
    chi2 = float(np.sum((counts - expected) ** 2) / expected)
    critical = float(stats.chi2.ppf(0.99, df=n_members))
    return counts, chi2, chi2 > critical


@dataclass(frozen=True)
class DiagnosticsRecord:
    step: int
    time: float
    rmse_posterior: float
    rmse_forecast: float
    rmse_forecast_vs_noisyobs: float
    rmse_prior: float
    spread_posterior: float
    spread_forecast: float
    spread_prior: float
    ess: float
    n_temperatures: int
    propagator_evals: int

    FIELDS = (
        "step", "time", "rmse_posterior", "rmse_forecast",
        "rmse_forecast_vs_noisyobs", "rmse_prior", "spread_posterior",
        "spread_forecast", "spread_prior", "ess", "n_temperatures",
        "propagator_evals",
    )

    def row(self) -> list[str]:
        out = []
        for name in self.FIELDS:
            v = getattr(self, name)
            out.append(str(v) if isinstance(v, int) else repr(float(v)))
        return out


def write_diagnostics_csv(path, records: list[DiagnosticsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DiagnosticsRecord.FIELDS)
        for rec in records:
            writer.writerow(rec.row())


def read_diagnostics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append({k: float(v) for k, v in raw.items()})
        return rows


def forecast_reliability(
    posterior_states,
    prop,
    truth_fields: list[VectorField],
    j_max: int,
    key: RngKey,
) -> list[tuple[int, float, float]]:
    """Free-running forecast curves (j, rmse, spread) for j = 1..j_max.

    The posterior ensemble is propagated without assimilation; truth_fields[j-1]
    verifies the j-step forecast.
    """
    if j_max > len(truth_fields):
        raise ValueError("forecast horizon exceeds the stored truth data")
    states = list(posterior_states)
    curves = []
    for j in range(1, j_max + 1):
        states = [
            prop.propagate(s, prop.fresh_path(stream(int(Tag.FORECAST), *key, j, i)))
            for i, s in enumerate(states)
        ]
        velocities = [velocity_from_vorticity(s) for s in states]
        mean = ensemble_mean(velocities)
        curves.append((j, rmse(mean, truth_fields[j - 1]), spread(velocities)))
    return curves


def write_forecast_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "rmse", "spread"])
        for j, r, s in curves:
            writer.writerow([j, repr(float(r)), repr(float(s))])
