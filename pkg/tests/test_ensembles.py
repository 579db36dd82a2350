import numpy as np
import pytest

from saltda import dynamics as dyn
from saltda import ensembles as ens
from saltda.fields import (
    Grid,
    ScalarField,
    coarse_grain,
    curl,
    poisson_solve,
    velocity_from_vorticity,
    zeros,
)


@pytest.fixture(scope="module")
def spun_state():
    fine = Grid(32)
    params = dyn.ModelParams(a=0.1, b=8, r=0.01, dt=0.005)
    omega, _, snaps = dyn.spinup(fine, params, t_end=1.0, snapshot_every=50)
    return fine, params, omega, snaps


class TestDeform:
    def test_zero_beta_is_coarse_grained_truth(self, spun_state):
        fine, params, omega, _ = spun_state
        coarse = Grid(8)
        u = velocity_from_vorticity(omega)
        out = ens.deform(omega, u, 0.0, 100, params, coarse)
        want = coarse_grain(omega, coarse)
        assert np.array_equal(out.values, want.values)

    def test_zero_steps_is_coarse_grained_truth(self, spun_state):
        fine, params, omega, _ = spun_state
        coarse = Grid(8)
        u = velocity_from_vorticity(omega)
        out = ens.deform(omega, u, 0.7, 0, params, coarse)
        want = coarse_grain(omega, coarse)
        assert np.array_equal(out.values, want.values)

    def test_casimir_conservation(self):
        # advection only: mean vorticity is conserved to roundoff and
        # enstrophy to time-stepping error, checked before coarse graining
        fine = Grid(64)
        coarse = Grid(16)
        params = dyn.ModelParams(a=0.1, b=8, r=0.01, dt=0.005)
        omega0, _, _ = dyn.spinup(fine, params, t_end=0.5)
        u = velocity_from_vorticity(omega0)
        beta, n_steps = 0.5, 100

        # replicate the internal advection to inspect the pre-restriction state
        psi_adv = poisson_solve(curl(u))
        psi_frozen = ScalarField(fine, beta * psi_adv.values, psi_adv.bc)
        from saltda.dynamics import _max_speed, _rk3

        speed = _max_speed(psi_frozen.values, fine.h)
        substeps = max(1, int(np.ceil(speed * params.dt / (0.5 * fine.h))))
        sub = dyn.ModelParams(a=0.0, b=1, r=0.0, dt=params.dt / substeps)
        w = omega0
        for _ in range(n_steps * substeps):
            w = _rk3(w, sub, lambda f: psi_frozen, zeros(fine))

        h2 = fine.h ** 2
        mean0 = np.sum(omega0.values) * h2
        mean1 = np.sum(w.values) * h2
        ens0 = np.sum(omega0.values ** 2) * h2
        ens1 = np.sum(w.values ** 2) * h2
        assert abs(mean1 - mean0) <= 1e-10 * max(abs(mean0), ens0)
        assert abs(ens1 - ens0) <= 1e-6 * ens0

        # the public operation agrees with the replicated advection
        got = ens.deform(omega0, u, beta, n_steps, params, coarse)
        want = coarse_grain(w, coarse)
        assert np.array_equal(got.values, want.values)

    def test_grid_mismatch(self, spun_state):
        fine, params, omega, _ = spun_state
        other = velocity_from_vorticity(dyn.spin_initial_field(Grid(16)))
        with pytest.raises(ValueError):
            ens.deform(omega, other, 0.5, 10, params, Grid(8))


class TestSampleInitialEnsemble:
    def test_fixed_seed_reproducible(self, spun_state):
        fine, params, omega, snaps = spun_state
        cfg = ens.DeformationConfig(pool=snaps, epsilon=0.25, n_steps=5)
        coarse = Grid(8)
        a, _ = ens.sample_initial_ensemble(cfg, 3, (42,), params, coarse, omega)
        b, _ = ens.sample_initial_ensemble(cfg, 3, (42,), params, coarse, omega)
        for ma, mb in zip(a, b):
            assert np.array_equal(ma.values, mb.values)

    def test_members_are_exchangeable_draws(self, spun_state):
        fine, params, omega, snaps = spun_state
        cfg = ens.DeformationConfig(pool=snaps, epsilon=0.25, n_steps=5)
        coarse = Grid(8)
        members, records = ens.sample_initial_ensemble(cfg, 4, (7,), params, coarse, omega)
        assert len(members) == 4
        assert [r.member for r in records] == [0, 1, 2, 3]
        # per-member keyed streams: a 2-member sample equals the first two
        # members of a 4-member sample
        first_two, _ = ens.sample_initial_ensemble(cfg, 2, (7,), params, coarse, omega)
        assert np.array_equal(first_two[0].values, members[0].values)
        assert np.array_equal(first_two[1].values, members[1].values)

    def test_members_have_dirichlet_stream(self, spun_state):
        fine, params, omega, snaps = spun_state
        cfg = ens.DeformationConfig(pool=snaps, epsilon=0.25, n_steps=5)
        members, _ = ens.sample_initial_ensemble(cfg, 2, (9,), params, Grid(8), omega)
        for m in members:
            psi = poisson_solve(m)
            assert np.all(psi.values[0, :] == 0.0)
            assert np.all(psi.values[:, -1] == 0.0)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            ens.DeformationConfig(pool=[], epsilon=0.25, n_steps=5)


class TestCheckpoints:
    def test_ensemble_round_trip(self, tmp_path, spun_state):
        fine, params, omega, snaps = spun_state
        cfg = ens.DeformationConfig(pool=snaps, epsilon=0.25, n_steps=2)
        members, records = ens.sample_initial_ensemble(cfg, 3, (1,), params, Grid(8), omega)
        ens.save_ensemble(tmp_path / "ens", members, records)
        back = ens.load_ensemble(tmp_path / "ens")
        assert len(back) == 3
        for a, b in zip(members, back):
            assert np.array_equal(a.values, b.values)
        manifest = (tmp_path / "ens" / "manifest.csv").read_text().splitlines()
        assert manifest[0] == "member,beta,pool_index,n_steps,seed"

    def test_assimilation_checkpoint_round_trip(self, tmp_path):
        from saltda import stochastic as sto
        from saltda.filtering import Particle
        from saltda.rng import stream

        g = Grid(8)
        rng = np.random.default_rng(0)
        particles = []
        for i in range(2):
            state = ScalarField(g, rng.standard_normal((9, 9)))
            parent = ScalarField(g, rng.standard_normal((9, 9)))
            path = sto.brownian_increments(stream(i), 3, 4, 0.1)
            particles.append(Particle(parent, path, state, -1.0))
        prior = [ScalarField(g, rng.standard_normal((9, 9)))]
        ens.save_assimilation_checkpoint(tmp_path / "ck", 7, particles, prior)
        window, states, prior_back = ens.load_assimilation_checkpoint(tmp_path / "ck")
        assert window == 7
        assert len(states) == 2 and len(prior_back) == 1
        assert np.array_equal(states[0].values, particles[0].state.values)
        assert np.array_equal(prior_back[0].values, prior[0].values)
