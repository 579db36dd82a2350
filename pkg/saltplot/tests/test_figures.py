import csv

import numpy as np
import pytest

from saltplot.cli import main as cli_main
from saltplot.figures import (
    FigureSpec,
    SchemaError,
    chi_square_uniform,
    read_table,
    render,
    sidecar_path,
)

DIAG_HEADER = (
    "step,time,rmse_posterior,rmse_forecast,rmse_forecast_vs_noisyobs,"
    "rmse_prior,spread_posterior,spread_forecast,spread_prior,ess,"
    "n_temperatures,propagator_evals"
)


def write_diagnostics(path, n_rows=20, rmse_value=None):
    rng = np.random.default_rng(0)
    with open(path, "w", newline="") as fh:
        fh.write(DIAG_HEADER + "\n")
        writer = csv.writer(fh)
        for step in range(1, n_rows + 1):
            r = rmse_value if rmse_value is not None else rng.uniform(0.1, 1.0)
            writer.writerow([
                step, repr(step * 0.1), repr(float(r)), repr(float(r) * 1.1),
                repr(float(r) * 2.0), repr(float(r) * 3.0), repr(0.2), repr(0.25),
                repr(0.5), repr(19.2), 2, 168,
            ])


def write_ranks(path, ranks):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "rank"])
        for i, r in enumerate(ranks, start=1):
            writer.writerow([i, int(r)])


def write_trajectory(path, n_rows=15, members=3):
    rng = np.random.default_rng(1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "truth", "truth_plus_noise", "posterior_mean", "prior_mean"]
            + [f"member_{i}" for i in range(members)]
        )
        for step in range(1, n_rows + 1):
            base = float(np.sin(step / 3.0))
            row = [step, repr(base), repr(base + 0.05), repr(base + 0.01), repr(base - 0.1)]
            row += [repr(base + float(rng.normal(0, 0.05))) for _ in range(members)]
            writer.writerow(row)


def write_forecast(path, j_max=10):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "rmse", "spread"])
        for j in range(1, j_max + 1):
            writer.writerow([j, repr(0.1 * j), repr(0.08 * j)])


@pytest.fixture
def golden_dir(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    write_diagnostics(run / "diagnostics.csv")
    rng = np.random.default_rng(2)
    for label in ("0.25_0.25", "0.5_0.5", "0.75_0.75"):
        write_ranks(run / f"ranks_{label}.csv", rng.integers(0, 9, size=400))
    write_trajectory(run / "trajectory_0.25_0.25.csv")
    write_trajectory(run / "trajectory_0.5_0.5.csv")
    write_forecast(run / "forecast_12.csv")
    return run


class TestAllKindsRender:
    @pytest.mark.parametrize(
        "kind",
        ["rmse_spread", "statistics_grid", "rank_histograms", "trajectories",
         "forecast_reliability"],
    )
    def test_renders_image_and_sidecar(self, golden_dir, tmp_path, kind):
        out = tmp_path / "figs" / f"{kind}.png"
        spec = FigureSpec(kind=kind, input_dir=golden_dir, output_path=out,
                          options={"n_members": 8})
        result = render(spec)
        assert result.exists()
        assert result.stat().st_size > 0
        assert result.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        side = sidecar_path(result)
        assert side.exists()
        with open(side, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) > 1


class TestSidecarsMatchInputs:
    def test_rmse_sidecar_equals_input_columns(self, golden_dir, tmp_path):
        out = tmp_path / "rmse_spread.png"
        render(FigureSpec("rmse_spread", golden_dir, out))
        side = read_table(sidecar_path(out), ("series", "step", "value"))
        diag = read_table(golden_dir / "diagnostics.csv", ("step", "rmse_posterior"))
        plotted = [
            float(v) for s, v in zip(side["series"], side["value"])
            if s == "rmse_posterior"
        ]
        assert plotted == [float(v) for v in diag["rmse_posterior"]]

    def test_trajectory_sidecar_equals_input(self, golden_dir, tmp_path):
        out = tmp_path / "trajectories.png"
        render(FigureSpec("trajectories", golden_dir, out))
        side = read_table(sidecar_path(out), ("probe", "series", "step", "value"))
        src = read_table(golden_dir / "trajectory_0.5_0.5.csv", ("step", "truth"))
        plotted = [
            float(v)
            for p, s, v in zip(side["probe"], side["series"], side["value"])
            if p == "trajectory_0.5_0.5" and s == "truth"
        ]
        assert plotted == [float(v) for v in src["truth"]]

    def test_forecast_sidecar_equals_input(self, golden_dir, tmp_path):
        out = tmp_path / "forecast_reliability.png"
        render(FigureSpec("forecast_reliability", golden_dir, out))
        side = read_table(sidecar_path(out), ("start", "series", "j", "value"))
        src = read_table(golden_dir / "forecast_12.csv", ("j", "rmse", "spread"))
        plotted = [
            float(v) for s, v in zip(side["series"], side["value"]) if s == "spread"
        ]
        assert plotted == [float(v) for v in src["spread"]]


class TestKnownValues:
    def test_constant_rmse_extent(self, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        write_diagnostics(run / "diagnostics.csv", n_rows=12, rmse_value=1.0)
        out = tmp_path / "rmse_spread.png"
        render(FigureSpec("rmse_spread", run, out))
        side = read_table(sidecar_path(out), ("series", "step", "value"))
        vals = [
            float(v) for s, v in zip(side["series"], side["value"])
            if s == "rmse_posterior"
        ]
        assert min(vals) == max(vals) == 1.0

    def test_empty_diagnostics_renders_with_warning(self, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        (run / "diagnostics.csv").write_text(DIAG_HEADER + "\n")
        out = tmp_path / "rmse_spread.png"
        with pytest.warns(UserWarning, match="no data rows"):
            result = render(FigureSpec("rmse_spread", run, out))
        assert result.exists()
        side = sidecar_path(result)
        with open(side, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["series", "step", "value"]]

    def test_uniform_ranks_flat_bins_and_chi2_crosscheck(self, tmp_path):
        # bins within 3*sqrt(expected) of uniform; the annotation must agree
        # with the primary implementation's statistic to 1e-9
        run = tmp_path / "run"
        run.mkdir()
        rng = np.random.default_rng(3)
        n_members = 9
        samples = 5000
        ranks = rng.integers(0, n_members + 1, size=samples)
        write_ranks(run / "ranks_0.5_0.5.csv", ranks)
        out = tmp_path / "rank_histograms.png"
        render(FigureSpec("rank_histograms", run, out, {"n_members": n_members}))
        side = read_table(sidecar_path(out), ("probe", "bin", "count", "chi2"))
        counts = np.array([int(c) for c in side["count"]])
        expected = samples / (n_members + 1)
        assert counts.sum() == samples
        assert np.all(np.abs(counts - expected) <= 3.0 * np.sqrt(expected))

        chi2_plot = float(side["chi2"][0])
        from saltda.diagnostics import rank_histogram_chi2

        _, chi2_primary, _ = rank_histogram_chi2(ranks, n_members)
        assert abs(chi2_plot - chi2_primary) <= 1e-9


class TestSchemaValidation:
    def test_missing_column_named_in_error(self, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        (run / "diagnostics.csv").write_text("step,rmse_posterior\n1,0.5\n")
        with pytest.raises(SchemaError, match="rmse_forecast"):
            render(FigureSpec("rmse_spread", run, tmp_path / "x.png"))

    def test_missing_file_rejected(self, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        with pytest.raises(SchemaError, match="diagnostics.csv"):
            render(FigureSpec("rmse_spread", run, tmp_path / "x.png"))

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown figure kind"):
            FigureSpec("pie_chart", tmp_path, tmp_path / "x.png")


class TestCli:
    def test_cli_renders(self, golden_dir, tmp_path, capsys):
        out_dir = tmp_path / "figs"
        code = cli_main([
            "rank_histograms", "--in", str(golden_dir), "--out", str(out_dir),
            "--members", "8",
        ])
        assert code == 0
        assert (out_dir / "rank_histograms.png").exists()
        assert (out_dir / "rank_histograms.csv").exists()
