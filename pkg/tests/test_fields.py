import numpy as np
import pytest

from saltda import fields
from saltda.fields import (
    BoundaryCondition,
    Grid,
    ScalarField,
    VectorField,
    coarse_grain_stream,
    curl,
    from_function,
    helmholtz_inverse,
    laplacian,
    perp_grad,
    poisson_solve,
    sample_at,
    zeros,
)


def sine_mode(grid, kx=1, ky=1):
    return from_function(grid, lambda x, y: np.sin(kx * np.pi * x) * np.sin(ky * np.pi * y))


def interior(a):
    return a[1:-1, 1:-1]


class TestGrid:
    def test_spacing(self):
        g = Grid(64)
        assert g.h * g.n == 1.0
        assert g.nodes == 65

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            Grid(3)

    def test_dirichlet_boundary_enforced(self):
        g = Grid(8)
        bad = np.ones((9, 9))
        with pytest.raises(ValueError):
            ScalarField(g, bad, BoundaryCondition.DIRICHLET_ZERO)


class TestPoisson:
    def test_analytic_sine_mode(self):
        # psi = sin(pi x) sin(pi y) solves Laplacian(psi) = -2 pi^2 psi
        errs = {}
        for n in (32, 64, 128):
            g = Grid(n)
            f = from_function(g, lambda x, y: -2.0 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y))
            psi = poisson_solve(f)
            exact = sine_mode(g).values
            errs[n] = np.max(np.abs(psi.values - exact))
        # second order: error ratio ~4 under grid doubling
        assert errs[32] / errs[64] == pytest.approx(4.0, rel=0.1)
        assert errs[64] / errs[128] == pytest.approx(4.0, rel=0.1)

    def test_discrete_residual(self):
        rng = np.random.default_rng(0)
        g = Grid(48)
        f = ScalarField(g, rng.standard_normal((49, 49)))
        psi = poisson_solve(f)
        res = interior(laplacian(psi).values) - interior(f.values)
        assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(interior(f.values))

    def test_zero_input(self):
        g = Grid(16)
        psi = poisson_solve(zeros(g))
        assert np.all(psi.values == 0.0)
        assert psi.bc == BoundaryCondition.DIRICHLET_ZERO

    def test_linearity(self):
        rng = np.random.default_rng(1)
        g = Grid(24)
        f1 = ScalarField(g, rng.standard_normal((25, 25)))
        f2 = ScalarField(g, rng.standard_normal((25, 25)))
        a, b = 1.7, -0.3
        combo = ScalarField(g, a * f1.values + b * f2.values)
        lhs = poisson_solve(combo).values
        rhs = a * poisson_solve(f1).values + b * poisson_solve(f2).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))

    def test_nonfinite_rejected(self):
        g = Grid(8)
        bad = np.zeros((9, 9))
        bad[4, 4] = np.nan
        with pytest.raises(ValueError):
            poisson_solve(ScalarField(g, bad))

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        g = Grid(32)
        f = ScalarField(g, rng.standard_normal((33, 33)))
        a = poisson_solve(f).values
        b = poisson_solve(f).values
        assert np.array_equal(a, b)


class TestHelmholtz:
    def test_analytic_sine_mode(self):
        # (I - Lap/k^2)^-1 on the (1,1) mode has gain 1/(1 + 2 pi^2/k^2)
        k = 8.0
        gain = 1.0 / (1.0 + 2.0 * np.pi ** 2 / k ** 2)
        errs = {}
        for n in (32, 64, 128):
            g = Grid(n)
            f = sine_mode(g)
            out = helmholtz_inverse(f, k)
            errs[n] = np.max(np.abs(out.values - gain * f.values))
        assert errs[32] / errs[64] == pytest.approx(4.0, rel=0.15)
        assert errs[64] / errs[128] == pytest.approx(4.0, rel=0.15)

    def test_zero_input(self):
        out = helmholtz_inverse(zeros(Grid(16)), 4.0)
        assert np.all(out.values == 0.0)

    def test_large_k_is_identity(self):
        rng = np.random.default_rng(3)
        g = Grid(32)
        vals = np.zeros((33, 33))
        vals[1:-1, 1:-1] = rng.standard_normal((31, 31))
        f = ScalarField(g, vals)
        out = helmholtz_inverse(f, 1e6)
        err = np.abs(interior(out.values) - interior(f.values))
        assert np.max(err) <= 1e-4 * np.max(np.abs(interior(f.values)))

    def test_bad_k_rejected(self):
        with pytest.raises(ValueError):
            helmholtz_inverse(zeros(Grid(8)), 0.0)

    def test_contraction_on_sine_modes(self):
        # every sine-mode coefficient is scaled by 1/(1 + lam/k^2) <= 1
        rng = np.random.default_rng(4)
        g = Grid(32)
        from scipy import fft as sfft

        coeffs = np.zeros((31, 31))
        coeffs[:6, :6] = rng.standard_normal((6, 6))
        vals = np.zeros((33, 33))
        vals[1:-1, 1:-1] = sfft.idstn(coeffs, type=1)
        f = ScalarField(g, vals)
        out = helmholtz_inverse(f, 5.0)
        cin = sfft.dstn(interior(f.values), type=1)
        cout = sfft.dstn(interior(out.values), type=1)
        assert np.all(np.abs(cout) <= np.abs(cin) + 1e-12 * np.max(np.abs(cin)))


class TestPerpGrad:
    def test_linear_field_exact(self):
        g = Grid(16)
        psi = from_function(g, lambda x, y: y)
        u = perp_grad(psi)
        assert np.allclose(u.x.values, -1.0, rtol=0, atol=1e-14)
        assert np.allclose(u.y.values, 0.0, rtol=0, atol=1e-14)

    def test_constant_field(self):
        g = Grid(16)
        psi = from_function(g, lambda x, y: 3.5 + 0 * x)
        u = perp_grad(psi)
        assert np.all(u.x.values == 0.0)
        assert np.all(u.y.values == 0.0)

    def test_analytic_convergence(self):
        errs = {}
        for n in (32, 64, 128):
            g = Grid(n)
            psi = sine_mode(g)
            u = perp_grad(psi)
            x, y = g.mesh()
            ux_exact = -np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
            uy_exact = np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
            errs[n] = max(
                np.max(np.abs(u.x.values - ux_exact)),
                np.max(np.abs(u.y.values - uy_exact)),
            )
        assert errs[32] / errs[64] == pytest.approx(4.0, rel=0.2)
        assert errs[64] / errs[128] == pytest.approx(4.0, rel=0.2)

    def test_no_normal_flow_for_dirichlet_stream(self):
        rng = np.random.default_rng(5)
        g = Grid(24)
        vals = np.zeros((25, 25))
        vals[1:-1, 1:-1] = rng.standard_normal((23, 23))
        psi = ScalarField(g, vals, BoundaryCondition.DIRICHLET_ZERO)
        u = perp_grad(psi)
        assert np.max(np.abs(u.x.values[:, 0])) <= 1e-12   # x = 0 face
        assert np.max(np.abs(u.x.values[:, -1])) <= 1e-12  # x = 1 face
        assert np.max(np.abs(u.y.values[0, :])) <= 1e-12   # y = 0 face
        assert np.max(np.abs(u.y.values[-1, :])) <= 1e-12  # y = 1 face


class TestSampling:
    def test_node_values_exact(self):
        rng = np.random.default_rng(6)
        g = Grid(8)
        ux = ScalarField(g, rng.standard_normal((9, 9)))
        uy = ScalarField(g, rng.standard_normal((9, 9)))
        u = VectorField(ux, uy)
        pts = [(0.0, 0.0), (0.5, 0.25), (1.0, 1.0)]
        got = sample_at(u, pts)
        assert got[0, 0] == ux.values[0, 0]
        assert got[1, 0] == ux.values[2, 4]
        assert got[2, 1] == uy.values[8, 8]

    def test_linear_field_exact(self):
        g = Grid(8)
        ux = from_function(g, lambda x, y: 2.0 * x - y + 0.25)
        uy = from_function(g, lambda x, y: x + 3.0 * y)
        u = VectorField(ux, uy)
        rng = np.random.default_rng(7)
        pts = rng.uniform(0, 1, size=(50, 2))
        got = sample_at(u, pts)
        want_x = 2.0 * pts[:, 0] - pts[:, 1] + 0.25
        want_y = pts[:, 0] + 3.0 * pts[:, 1]
        assert np.allclose(got[:, 0], want_x, atol=1e-13)
        assert np.allclose(got[:, 1], want_y, atol=1e-13)

    def test_cell_center_is_mean_of_corners(self):
        rng = np.random.default_rng(8)
        g = Grid(4)
        ux = ScalarField(g, rng.standard_normal((5, 5)))
        u = VectorField(ux, ux)
        got = sample_at(u, [(0.125, 0.375)])  # center of cell (0, 1)
        want = 0.25 * (
            ux.values[1, 0] + ux.values[1, 1] + ux.values[2, 0] + ux.values[2, 1]
        )
        assert got[0, 0] == pytest.approx(want, rel=1e-15)

    def test_outside_rejected(self):
        g = Grid(4)
        u = VectorField(zeros(g), zeros(g))
        with pytest.raises(ValueError):
            sample_at(u, [(1.2, 0.5)])


class TestCoarseGrain:
    def test_stream_gain_matches_helmholtz_factor(self):
        fine = Grid(64)
        coarse = Grid(16)
        omega = from_function(
            fine, lambda x, y: -2.0 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y)
        )
        psi_c = coarse_grain_stream(omega, coarse)
        # psi ~ sin mode; Helmholtz with k=16 scales it by 1/(1 + 2 pi^2/256)
        gain = 1.0 / (1.0 + 2.0 * np.pi ** 2 / coarse.n ** 2)
        x, y = coarse.mesh()
        want = gain * np.sin(np.pi * x) * np.sin(np.pi * y)
        assert np.max(np.abs(psi_c.values - want)) <= 5e-3 * np.max(np.abs(want))

    def test_coarse_grain_round_trip_consistency(self):
        # poisson_solve(laplacian(psi_c)) recovers psi_c when psi_c is DirichletZero
        rng = np.random.default_rng(9)
        fine = Grid(64)
        coarse = Grid(16)
        omega = ScalarField(fine, rng.standard_normal((65, 65)))
        q = fields.coarse_grain(omega, coarse)
        psi_direct = coarse_grain_stream(omega, coarse)
        psi_round = poisson_solve(q)
        assert np.max(np.abs(psi_round.values - psi_direct.values)) <= 1e-11

    def test_divisibility_required(self):
        with pytest.raises(ValueError):
            fields.restrict(zeros(Grid(10)), Grid(4))


class TestCurl:
    def test_curl_of_perp_grad_approximates_laplacian(self):
        g = Grid(64)
        psi = sine_mode(g)
        u = perp_grad(psi)
        w = curl(u)
        want = -2.0 * np.pi ** 2 * psi.values
        err = np.max(np.abs(interior(w.values) - interior(want)))
        assert err <= 0.02 * np.max(np.abs(want))


class TestFileFormat:
    def test_scalar_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        g = Grid(12)
        vals = np.zeros((13, 13))
        vals[1:-1, 1:-1] = rng.standard_normal((11, 11))
        f = ScalarField(g, vals, BoundaryCondition.DIRICHLET_ZERO)
        p = tmp_path / "f.sfld"
        fields.write_scalar(p, f)
        g2 = fields.read_scalar(p)
        assert g2.grid == f.grid
        assert g2.bc == f.bc
        assert np.array_equal(g2.values, f.values)

    def test_scalar_header_layout(self, tmp_path):
        f = zeros(Grid(5))
        p = tmp_path / "f.sfld"
        fields.write_scalar(p, f)
        raw = p.read_bytes()
        assert raw[:8] == b"SALTFLD1"
        assert int.from_bytes(raw[8:12], "little") == 1      # version
        assert int.from_bytes(raw[12:16], "little") == 1     # bc tag: Free
        assert int.from_bytes(raw[16:24], "little") == 5     # n
        assert len(raw) == 24 + 36 * 8

    def test_vector_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        g = Grid(6)
        u = VectorField(
            ScalarField(g, rng.standard_normal((7, 7))),
            ScalarField(g, rng.standard_normal((7, 7))),
        )
        p = tmp_path / "u.sfld"
        fields.write_vector(p, u)
        u2 = fields.read_vector(p)
        assert np.array_equal(u2.x.values, u.x.values)
        assert np.array_equal(u2.y.values, u.y.values)
        assert p.read_bytes()[:8] == b"SALTVEC1"

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.sfld"
        p.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(ValueError):
            fields.read_scalar(p)
