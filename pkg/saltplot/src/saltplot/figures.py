"""Figure rendering from the documented diagnostics CSV schemas.

The plotting layer computes no statistics of its own except one redundant
chi-square cross-check on rank histograms; every plotted number comes from
the CSVs.  Next to each image a sidecar CSV records exactly the plotted
series, so figure contents are testable without decoding the image.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_KINDS = (
    "rmse_spread",
    "statistics_grid",
    "rank_histograms",
    "trajectories",
    "forecast_reliability",
)

COLORS = {
    "posterior": "tab:blue",
    "forecast": "tab:green",
    "noisy": "tab:red",
    "prior": "tab:orange",
    "truth": "red",
    "truth_plus_noise": "hotpink",
}

_STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "svg.hashsalt": "saltplot",
}


class SchemaError(ValueError):
    """A required column or input file is missing."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    input_dir: Path
    output_path: Path
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(
                f"unknown figure kind {self.kind!r}; expected one of {FIGURE_KINDS}"
            )
        object.__setattr__(self, "input_dir", Path(self.input_dir))
        object.__setattr__(self, "output_path", Path(self.output_path))


def read_table(path, required: tuple[str, ...]) -> dict[str, list[str]]:
    """CSV as a column dict; missing files or columns raise SchemaError."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"missing input file {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SchemaError(f"{path} has no header row")
    header = rows[0]
    for col in required:
        if col not in header:
            raise SchemaError(f"{path} is missing required column {col!r}")
    table = {col: [] for col in header}
    for row in rows[1:]:
        for col, value in zip(header, row):
            table[col].append(value)
    return table


def _floats(table: dict, col: str) -> np.ndarray:
    return np.array([float(v) for v in table[col]])


def _write_sidecar(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def sidecar_path(output_path: Path) -> Path:
    return output_path.with_suffix(".csv")


def chi_square_uniform(counts: np.ndarray) -> float:
    """Pearson statistic against the uniform expectation (cross-check only)."""
    counts = np.asarray(counts, dtype=np.float64)
    expected = counts.sum() / counts.size
    if expected == 0:
        return 0.0
    return float(np.sum((counts - expected) ** 2) / expected)


# ---------------------------------------------------------------------------
# figure kinds
# ---------------------------------------------------------------------------

def _render_rmse_spread(spec: FigureSpec):
    table = read_table(
        spec.input_dir / "diagnostics.csv",
        ("step", "rmse_posterior", "rmse_forecast", "rmse_forecast_vs_noisyobs",
         "rmse_prior", "spread_posterior", "spread_forecast", "spread_prior"),
    )
    steps = _floats(table, "step")
    fig, (ax_rmse, ax_sprd) = plt.subplots(1, 2, figsize=(10, 4))
    series = [
        ("rmse_posterior", COLORS["posterior"], ax_rmse, "posterior"),
        ("rmse_forecast", COLORS["forecast"], ax_rmse, "one-step forecast"),
        ("rmse_forecast_vs_noisyobs", COLORS["noisy"], ax_rmse, "forecast vs noisy truth"),
        ("rmse_prior", COLORS["prior"], ax_rmse, "prior (no assimilation)"),
        ("spread_posterior", COLORS["posterior"], ax_sprd, "posterior"),
        ("spread_forecast", COLORS["forecast"], ax_sprd, "one-step forecast"),
        ("spread_prior", COLORS["prior"], ax_sprd, "prior (no assimilation)"),
    ]
    if steps.size == 0:
        warnings.warn("diagnostics.csv has no data rows; rendering empty axes")
    rows = []
    for col, color, ax, label in series:
        vals = _floats(table, col)
        keep = ~np.isnan(vals)
        ax.plot(steps[keep], vals[keep], color=color, label=label)
        rows.extend([col, f"{s:g}", repr(float(v))] for s, v in zip(steps[keep], vals[keep]))
    ax_rmse.set_xlabel("assimilation step")
    ax_rmse.set_ylabel("rmse")
    ax_rmse.legend(loc="best")
    ax_sprd.set_xlabel("assimilation step")
    ax_sprd.set_ylabel("ensemble spread")
    ax_sprd.legend(loc="best")
    return fig, ["series", "step", "value"], rows


def _render_statistics_grid(spec: FigureSpec):
    table = read_table(
        spec.input_dir / "diagnostics.csv",
        ("step", "rmse_posterior", "spread_posterior", "propagator_evals", "ess"),
    )
    steps = _floats(table, "step")
    if steps.size == 0:
        warnings.warn("diagnostics.csv has no data rows; rendering empty axes")
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    panels = [
        ("rmse_posterior", "posterior rmse", axes[0, 0]),
        ("spread_posterior", "posterior spread", axes[0, 1]),
        ("propagator_evals", "model evaluations", axes[1, 0]),
        ("ess", "effective sample size", axes[1, 1]),
    ]
    rows = []
    for col, label, ax in panels:
        vals = _floats(table, col)
        keep = ~np.isnan(vals)
        ax.plot(steps[keep], vals[keep], color=COLORS["posterior"])
        ax.set_title(label)
        ax.set_xlabel("assimilation step")
        rows.extend([col, f"{s:g}", repr(float(v))] for s, v in zip(steps[keep], vals[keep]))
    return fig, ["series", "step", "value"], rows


def _rank_files(spec: FigureSpec) -> list[Path]:
    files = sorted(spec.input_dir.glob("ranks_*.csv"))
    if not files:
        raise SchemaError(f"no ranks_<x>_<y>.csv files under {spec.input_dir}")
    return files


def _render_rank_histograms(spec: FigureSpec):
    files = _rank_files(spec)
    n_members = spec.options.get("n_members")
    cols = min(3, len(files))
    nrows = (len(files) + cols - 1) // cols
    fig, axes = plt.subplots(nrows, cols, figsize=(3.4 * cols, 2.8 * nrows), squeeze=False)
    rows = []
    for k, path in enumerate(files):
        table = read_table(path, ("step", "rank"))
        ranks = np.array([int(v) for v in table["rank"]])
        bins = (n_members + 1) if n_members else (int(ranks.max(initial=0)) + 1)
        counts = np.bincount(ranks, minlength=bins)
        chi2 = chi_square_uniform(counts)
        ax = axes[k // cols][k % cols]
        label = path.stem.replace("ranks_", "").replace("_", ", ")
        ax.bar(np.arange(counts.size), counts, color=COLORS["posterior"], width=0.9)
        ax.set_title(f"[{label}]  chi2={chi2:.1f}")
        ax.set_xlabel("rank")
        for b, c in enumerate(counts):
            rows.append([path.stem, str(b), str(int(c)), repr(chi2)])
    for k in range(len(files), nrows * cols):
        axes[k // cols][k % cols].axis("off")
    return fig, ["probe", "bin", "count", "chi2"], rows


def _render_trajectories(spec: FigureSpec):
    files = sorted(spec.input_dir.glob("trajectory_*.csv"))
    if not files:
        raise SchemaError(f"no trajectory_<x>_<y>.csv files under {spec.input_dir}")
    cols = min(3, len(files))
    nrows = (len(files) + cols - 1) // cols
    fig, axes = plt.subplots(nrows, cols, figsize=(3.8 * cols, 2.8 * nrows), squeeze=False)
    rows = []
    core = ("truth", "truth_plus_noise", "posterior_mean", "prior_mean")
    styles = {
        "truth": dict(color=COLORS["truth"]),
        "truth_plus_noise": dict(color=COLORS["truth_plus_noise"], linestyle="--"),
        "posterior_mean": dict(color=COLORS["posterior"]),
        "prior_mean": dict(color=COLORS["prior"]),
    }
    for k, path in enumerate(files):
        table = read_table(path, ("step",) + core)
        steps = _floats(table, "step")
        ax = axes[k // cols][k % cols]
        members = [c for c in table if c.startswith("member_")]
        for col in members:
            vals = _floats(table, col)
            ax.plot(steps, vals, color="0.75", linewidth=0.6, zorder=1)
            rows.extend(
                [path.stem, col, f"{s:g}", repr(float(v))] for s, v in zip(steps, vals)
            )
        for col in core:
            vals = _floats(table, col)
            ax.plot(steps, vals, label=col, zorder=2, **styles[col])
            rows.extend(
                [path.stem, col, f"{s:g}", repr(float(v))] for s, v in zip(steps, vals)
            )
        label = path.stem.replace("trajectory_", "").replace("_", ", ")
        ax.set_title(f"[{label}]")
        ax.set_xlabel("assimilation step")
        if k == 0:
            ax.legend(fontsize=7)
    for k in range(len(files), nrows * cols):
        axes[k // cols][k % cols].axis("off")
    return fig, ["probe", "series", "step", "value"], rows


def _render_forecast_reliability(spec: FigureSpec):
    files = sorted(spec.input_dir.glob("forecast_*.csv"))
    if not files:
        raise SchemaError(f"no forecast_<start>.csv files under {spec.input_dir}")
    fig, ax = plt.subplots(figsize=(6, 4))
    cycle = ["tab:red", "tab:blue", "tab:purple", "tab:brown"]
    rows = []
    for k, path in enumerate(files):
        table = read_table(path, ("j", "rmse", "spread"))
        j = _floats(table, "j")
        r = _floats(table, "rmse")
        s = _floats(table, "spread")
        start = path.stem.replace("forecast_", "")
        color = cycle[k % len(cycle)]
        ax.plot(j, r, color=color, label=f"rmse from step {start}")
        ax.plot(j, s, color=color, linestyle="--", label=f"spread from step {start}")
        rows.extend([start, "rmse", f"{jj:g}", repr(float(v))] for jj, v in zip(j, r))
        rows.extend([start, "spread", f"{jj:g}", repr(float(v))] for jj, v in zip(j, s))
    ax.set_xlabel("forecast steps")
    ax.set_ylabel("rmse / spread")
    ax.legend(fontsize=8)
    return fig, ["start", "series", "j", "value"], rows


_RENDERERS = {
    "rmse_spread": _render_rmse_spread,
    "statistics_grid": _render_statistics_grid,
    "rank_histograms": _render_rank_histograms,
    "trajectories": _render_trajectories,
    "forecast_reliability": _render_forecast_reliability,
}


def render(spec: FigureSpec) -> Path:
    """Render one figure and its sidecar CSV; returns the image path."""
    with plt.rc_context(_STYLE):
        fig, header, rows = _RENDERERS[spec.kind](spec)
        spec.output_path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(spec.output_path, metadata={"Software": "saltplot"})
        plt.close(fig)
    _write_sidecar(sidecar_path(spec.output_path), header, rows)
    return spec.output_path
