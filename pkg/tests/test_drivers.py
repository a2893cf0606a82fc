import math

import numpy as np
import pytest

from bspde.drivers import (
    LevyChannel,
    LevySpec,
    TimeGrid,
    compensate,
    paths_to_csv_rows,
    simulate_brownian,
    simulate_drivers,
    simulate_subordinator,
)
from bspde.fields import ConfigurationError, ModelDims

DIMS = ModelDims(p=1, q=1, d=2, h=0)


class TestTimeGrid:
    def test_knots(self):
        tg = TimeGrid(T=2.0, n_steps=4)
        assert np.allclose(tg.times, [0, 0.5, 1.0, 1.5, 2.0])
        assert tg.dt == 0.5

    def test_invariants(self):
        with pytest.raises(ConfigurationError):
            TimeGrid(T=0.0, n_steps=4)
        with pytest.raises(ConfigurationError):
            TimeGrid(T=1.0, n_steps=0)


class TestBrownian:
    def test_starts_at_zero(self):
        d = simulate_brownian(DIMS, TimeGrid(1.0, 8), seed=1, n_paths=50)
        assert np.abs(d.W[:, 0, :]).max() == 0.0

    def test_terminal_moments(self):
        n = 20000
        d = simulate_brownian(DIMS, TimeGrid(1.0, 8), seed=2, n_paths=n)
        w1 = d.W[:, -1, 0]
        assert abs(w1.mean()) < 3.0 / math.sqrt(n)
        assert abs(w1.var() - 1.0) < 3.0 * math.sqrt(2.0 / n)

    def test_component_independence(self):
        n = 20000
        d = simulate_brownian(DIMS, TimeGrid(1.0, 4), seed=3, n_paths=n)
        w = d.W[:, -1, :]
        corr = np.corrcoef(w[:, 0], w[:, 1])[0, 1]
        assert abs(corr) < 3.0 / math.sqrt(n)

    def test_seed_determinism(self):
        a = simulate_brownian(DIMS, TimeGrid(1.0, 8), seed=7, n_paths=20)
        b = simulate_brownian(DIMS, TimeGrid(1.0, 8), seed=7, n_paths=20)
        assert np.array_equal(a.dW, b.dW)

    def test_path_is_function_of_seed_and_index(self):
        # enlarging the sample must not disturb earlier paths
        small = simulate_brownian(DIMS, TimeGrid(1.0, 8), seed=7, n_paths=10)
        large = simulate_brownian(DIMS, TimeGrid(1.0, 8), seed=7, n_paths=40)
        assert np.array_equal(small.dW, large.dW[:10])


class TestSubordinator:
    def test_zero_mass_measure_gives_flat_paths(self):
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 0.0)], lam=1.0),))
        d = simulate_subordinator(levy, TimeGrid(1.0, 8), seed=4, n_paths=30)
        assert np.abs(d.L).max() == 0.0

    def test_mean_slope_matches_intensity(self):
        # E L(1) = lam * t * int z nu(dz) = 1 * 1 * (1 * 2) = 2
        n = 20000
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 2.0)], lam=1.0),))
        d = simulate_subordinator(levy, TimeGrid(1.0, 8), seed=5, n_paths=n)
        l1 = d.L[:, -1, 0]
        se = l1.std() / math.sqrt(n)
        assert abs(l1.mean() - 2.0) < 3 * se

    def test_paths_nondecreasing(self):
        levy = LevySpec(channels=(
            LevyChannel.from_atoms([(0.5, 1.0), (2.0, 0.5)], lam=1.3),
        ))
        for seed in (1, 2, 3):
            d = simulate_subordinator(levy, TimeGrid(1.0, 16), seed=seed, n_paths=40)
            assert (np.diff(d.L[:, :, 0], axis=1) >= -1e-15).all()

    def test_channels_are_independent_streams(self):
        ch = LevyChannel.from_atoms([(1.0, 1.0)], lam=1.0)
        levy = LevySpec(channels=(ch, ch))
        d = simulate_subordinator(levy, TimeGrid(1.0, 8), seed=6, n_paths=200)
        assert not np.array_equal(d.L[:, :, 0], d.L[:, :, 1])

    def test_density_channel_quadrature(self):
        levy = LevySpec(channels=(
            LevyChannel.from_density(lambda z: np.exp(-z), z_cap=3.0, lam=1.0, n_quad=12),
        ))
        ch = levy.channels[0]
        # mass approximates int_eps^3 e^-z dz
        eps = 1e-3 * 3.0
        expected = math.exp(-eps) - math.exp(-3.0)
        assert ch.total_mass == pytest.approx(expected, rel=1e-6)
        # reported small-jump mass: estimate of int_0^eps, deliberately keeping
        # clear of z = 0 where Levy densities may diverge
        assert ch.truncated_mass == pytest.approx(1.0 - math.exp(-eps), rel=5e-3)


class TestCompensate:
    def _levy(self, lam=1.0):
        return LevySpec(channels=(LevyChannel.from_atoms([(1.0, 0.8)], lam=lam),))

    def test_no_jump_step_is_pure_compensator(self):
        levy = self._levy()
        tg = TimeGrid(1.0, 4)
        d = compensate(simulate_subordinator(levy, tg, seed=8, n_paths=200), levy)
        comp = d.compensated(0)
        counts = d.jump_channels[0].counts
        no_jump = counts == 0
        assert no_jump.any()
        expected = -levy.channels[0].lam * levy.channels[0].masses[0] * tg.dt
        assert np.allclose(comp[no_jump], expected)

    def test_martingale_mean(self):
        n = 20000
        levy = self._levy()
        d = compensate(simulate_subordinator(levy, TimeGrid(1.0, 8), seed=9, n_paths=n), levy)
        total = d.compensated(0).sum(axis=(1, 2))
        se = total.std() / math.sqrt(n)
        assert abs(total.mean()) < 3 * se

    def test_compensator_linear_in_lambda(self):
        tg = TimeGrid(1.0, 4)
        levy1, levy2 = self._levy(lam=1.0), self._levy(lam=2.0)
        d1 = compensate(simulate_subordinator(levy1, tg, seed=10, n_paths=50), levy1)
        d2 = compensate(simulate_subordinator(levy2, tg, seed=10, n_paths=50), levy2)
        comp1 = d1.compensated(0) - d1.jump_channels[0].counts
        comp2 = d2.compensated(0) - d2.jump_channels[0].counts
        assert np.allclose(comp2, 2.0 * comp1)

    def test_disjoint_increments_uncorrelated(self):
        n = 20000
        levy = self._levy()
        d = compensate(simulate_subordinator(levy, TimeGrid(1.0, 8), seed=11, n_paths=n), levy)
        comp = d.compensated(0)[:, :, 0]
        first, second = comp[:, :4].sum(axis=1), comp[:, 4:].sum(axis=1)
        corr = np.corrcoef(first, second)[0, 1]
        assert abs(corr) < 3.0 / math.sqrt(n)


class TestCombined:
    def test_simulate_drivers_state(self):
        dims = ModelDims(p=1, q=1, d=1, h=1)
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 1.0)], lam=1.0),))
        d = simulate_drivers(dims, TimeGrid(1.0, 4), levy, seed=12, n_paths=25)
        state = d.state_at(2)
        assert state.shape == (25, 2)
        assert np.allclose(state[:, 0], d.W[:, 2, 0])
        assert np.allclose(state[:, 1], d.L[:, 2, 0])

    def test_csv_rows(self):
        dims = ModelDims(p=1, q=1, d=1, h=1)
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 1.0)], lam=1.0),))
        d = simulate_drivers(dims, TimeGrid(1.0, 2), levy, seed=13, n_paths=2)
        header, rows = paths_to_csv_rows(d)
        assert header == ["path", "step", "channel", "value"]
        kinds = {r[2] for r in rows}
        assert kinds == {"dW1", "dL1"}
        assert len(rows) == 2 * 2 * 2
