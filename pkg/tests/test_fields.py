import math

import numpy as np
import pytest

from bspde.fields import (
    ConfigurationError,
    DomainSpec,
    FieldTriplet,
    GriddedField,
    ModelDims,
    NormWeights,
    annulus_norm,
    ck_norm,
    cinf_norm,
    field_to_csv_rows,
    make_grid,
    mgamma_norm,
    multi_indices,
    nu_norm,
    partial_derivative,
)
from bspde.drivers import LevyChannel, LevySpec


def grid_1d(lo=0.0, hi=1.0, n=9):
    return make_grid(DomainSpec.box([[lo, hi]], n))


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

class TestMakeGrid:
    def test_box_1d_uniform_partition(self):
        g = grid_1d(0, 1, 5)
        assert np.allclose(g.nodes[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
        assert g.spacing == (0.25,)

    def test_annulus_1d_two_intervals(self):
        g = make_grid(DomainSpec.annulus(1, 2, 1, 4))
        x = g.nodes[:, 0]
        assert ((np.abs(x) >= 1 - 1e-12) & (np.abs(x) <= 2 + 1e-12)).all()
        assert (x < 0).any() and (x > 0).any()
        assert not ((x > -1) & (x < 1)).any()

    def test_box_2d_lexicographic(self):
        g = make_grid(DomainSpec.box([[0, 1], [0, 1]], 3))
        assert g.n_nodes == 9
        # lexicographic: first axis slowest
        assert np.allclose(g.nodes[0], [0, 0])
        assert np.allclose(g.nodes[1], [0, 0.5])
        assert np.allclose(g.nodes[3], [0.5, 0])

    def test_resolution_too_coarse_rejected(self):
        with pytest.raises(ConfigurationError, match="resolution"):
            DomainSpec.box([[0, 1]], 2)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ConfigurationError):
            DomainSpec.box([[1, 0]], 5)
        with pytest.raises(ConfigurationError):
            DomainSpec.annulus(2, 1, 1, 4)

    def test_dims_invariants(self):
        with pytest.raises(ConfigurationError):
            ModelDims(p=0, q=1, d=1, h=0)
        with pytest.raises(ConfigurationError):
            ModelDims(p=1, q=0, d=1, h=0)


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------

class TestPartialDerivative:
    def test_constant_field_has_zero_derivative(self):
        g = grid_1d()
        f = GriddedField.constant(g, 7.0)
        d = partial_derivative(f, (1,))
        assert np.abs(d.values).max() == 0.0

    def test_quadratic_exact_at_interior(self):
        g = grid_1d(0.5, 1.5, 11)  # h = 0.1, x = 1 interior
        f = GriddedField.from_function(g, lambda x: x[:, 0] ** 2)
        d = partial_derivative(f, (1,))
        i = np.argmin(np.abs(g.nodes[:, 0] - 1.0))
        assert d.values[i, 0] == pytest.approx(2.0, abs=1e-12)

    def test_sine_second_order_accuracy(self):
        # independent oracle: cos(0) = 1; central-difference bound O(h^2)
        g = grid_1d(-0.5, 0.5, 21)  # h = 0.05
        f = GriddedField.from_function(g, lambda x: np.sin(x[:, 0]))
        d = partial_derivative(f, (1,))
        i = np.argmin(np.abs(g.nodes[:, 0]))
        assert abs(d.values[i, 0] - 1.0) < 5e-4

    def test_order_zero_rejected(self):
        g = grid_1d()
        f = GriddedField.constant(g, 1.0)
        with pytest.raises(ValueError):
            partial_derivative(f, (0,))

    def test_cache_is_reused(self):
        g = grid_1d()
        f = GriddedField.from_function(g, lambda x: x[:, 0] ** 2)
        d1 = f.derivative((1,))
        assert f.derivative((1,)) is d1
        assert (1,) in f.derivative_cache

    def test_mixed_partials_commute(self):
        g = make_grid(DomainSpec.box([[0, 1], [0, 1]], 17))
        h = g.spacing[0]
        f = GriddedField.from_function(g, lambda x: np.sin(x[:, 0]) * np.cos(2 * x[:, 1]))
        dxy = g.derivative_nodes(g.derivative_nodes(f.values, (1, 0)), (0, 1))
        dyx = g.derivative_nodes(g.derivative_nodes(f.values, (0, 1)), (1, 0))
        assert np.abs(dxy - dyx).max() < 10 * h ** 2

    def test_multi_index_count(self):
        # number of order-c multi-indices in dimension p is C(c+p-1, p-1)
        assert len(multi_indices(2, 3)) == 4
        assert len(multi_indices(3, 2)) == 6


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

class TestCkNorm:
    def test_zero_field(self):
        g = grid_1d()
        assert ck_norm(GriddedField.constant(g, 0.0), 3) == 0.0

    def test_linear_field_k1(self):
        # hand computation: sup|x| = 1, sup|dx/dx| = 1
        g = grid_1d(0, 1, 9)
        f = GriddedField.from_function(g, lambda x: x[:, 0])
        assert ck_norm(f, 1) == pytest.approx(1.0, abs=1e-12)

    def test_constant_field_order_zero_dominates(self):
        g = grid_1d()
        f = GriddedField.constant(g, 3.0)
        assert ck_norm(f, 2) == pytest.approx(3.0)

    def test_monotone_in_k(self):
        g = grid_1d(0, 4, 9)
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b, c = rng.uniform(-1, 1, 3)
            f = GriddedField.from_function(g, lambda x: a * np.sin(b * x[:, 0]) + c)
            norms = [ck_norm(f, k) for k in range(4)]
            assert all(n2 >= n1 - 1e-14 for n1, n2 in zip(norms, norms[1:]))


class TestCinfNorm:
    def test_zero_field(self):
        g = grid_1d()
        assert cinf_norm(GriddedField.constant(g, 0.0), NormWeights()) == 0.0

    def test_constant_field_geometric_series(self):
        # oracle: constant c has every C^k norm equal to c, so the squared sum
        # is c^2 * sum_{k>=1} e^-k = c^2 / (e - 1)
        g = grid_1d(0, 4, 9)
        f = GriddedField.constant(g, 2.0)
        expected = 2.0 * math.sqrt(1.0 / (math.e - 1.0))
        assert cinf_norm(f, NormWeights(k_max=15)) == pytest.approx(expected, abs=1e-5)

    def test_weight_tail_bound(self):
        w = NormWeights(k_max=15)
        assert w.tail_bound() < 1e-6
        # xi positive, strictly decreasing
        assert all(w.xi(k) > w.xi(k + 1) > 0 for k in range(1, 20))

    def test_truncation_stability_15_to_20(self):
        # cubic fields: the stencils are exact from order four on, so every
        # computed C^k norm is uniformly bounded and the tail is pure xi-decay
        g = grid_1d(0, 4, 9)
        rng = np.random.default_rng(11)
        for _ in range(10):
            a, b, c, d = rng.uniform(-1, 1, 4)
            f = GriddedField.from_function(
                g, lambda x: a + b * x[:, 0] + c * x[:, 0] ** 2 / 4 + d * x[:, 0] ** 3 / 16)
            n15 = cinf_norm(f, NormWeights(k_max=15))
            n20 = cinf_norm(f, NormWeights(k_max=20))
            assert abs(n20 - n15) < 1e-5


class TestNuNorm:
    def test_zero_field(self):
        g = grid_1d()
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 1.0)], lam=1.0),))
        vt = [GriddedField.constant(g, 0.0, (1, 1))]
        assert nu_norm(vt, levy, 0) == 0.0

    def test_single_atom_collapses_to_value(self):
        g = grid_1d()
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 1.0)], lam=1.0),))
        vt = [GriddedField.constant(g, 2.0, (1, 1))]
        assert nu_norm(vt, levy, 0) == pytest.approx(2.0)

    def test_two_identical_channels_add_in_quadrature(self):
        g = grid_1d()
        ch = LevyChannel.from_atoms([(1.0, 1.0)], lam=1.0)
        levy = LevySpec(channels=(ch, ch))
        vt = [GriddedField.constant(g, 2.0, (1, 1))] * 2
        assert nu_norm(vt, levy, 0) == pytest.approx(math.sqrt(8.0))

    def test_empty_quadrature_rejected(self):
        with pytest.raises(ConfigurationError):
            LevyChannel(nodes=(), masses=(), lam=1.0)


class _StubSeries:
    """Minimal series protocol for norm tests: deterministic fields, no jumps."""

    def __init__(self, grid, times, v_fn, vbar_scale=0.0, n_paths=3):
        self.grid = grid
        self.times = np.asarray(times)
        self.levy = LevySpec.none()
        self.n_paths = n_paths
        self._v_fn = v_fn
        self._vbar_scale = vbar_scale

    def v_values(self, j):
        vals = self._v_fn(self.times[j], self.grid.nodes)[:, None]
        return np.broadcast_to(vals, (self.n_paths,) + vals.shape).copy()

    def vbar_values(self, j):
        return np.full((self.n_paths, self.grid.n_nodes, 1, 1), self._vbar_scale)

    def vtilde_values(self, j):
        return []


class TestMgammaNorm:
    def test_zero_triplet(self):
        g = grid_1d()
        s = _StubSeries(g, np.linspace(0, 1, 5), lambda t, x: np.zeros(len(x)))
        assert mgamma_norm(s, NormWeights(gamma=0.0), 0) == 0.0

    def test_unit_field_gamma_zero(self):
        g = grid_1d()
        s = _StubSeries(g, np.linspace(0, 1, 5), lambda t, x: np.ones(len(x)))
        assert mgamma_norm(s, NormWeights(gamma=0.0), 0) == pytest.approx(1.0)

    def test_unit_field_gamma_one_weights_sup(self):
        # sup over t of 1 * e^{2t} on [0, 1] is e^2
        g = grid_1d()
        s = _StubSeries(g, np.linspace(0, 1, 5), lambda t, x: np.ones(len(x)))
        assert mgamma_norm(s, NormWeights(gamma=1.0), 0) == pytest.approx(math.e ** 2)

    def test_nondecreasing_in_gamma(self):
        g = grid_1d()
        s = _StubSeries(g, np.linspace(0, 1, 5), lambda t, x: 1 + x[:, 0],
                        vbar_scale=0.5)
        vals = [mgamma_norm(s, NormWeights(gamma=gm), 1) for gm in (0.0, 0.5, 1.0, 2.0)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestAnnulusNorm:
    def _constant_unit_cinf(self, grid, w):
        # scale a constant so its graded norm is exactly one
        c = 1.0 / cinf_norm(GriddedField.constant(grid, 1.0), w)
        return GriddedField.constant(grid, c)

    def test_zero_field(self):
        from bspde.domains import annulus_family

        w = NormWeights(k_max=15)
        grids = annulus_family(0, 3, 1, 4)
        fields = [GriddedField.constant(g, 0.0) for g in grids]
        assert annulus_norm(fields, w, 0, 3) == 0.0

    def test_unit_shells_geometric_series(self):
        # oracle: sum_{n>=1} e^{-(n+1)} = 1 / (e (e - 1))
        from bspde.domains import annulus_family

        w = NormWeights(k_max=15)
        n_max = 16
        grids = annulus_family(0, n_max, 1, 4)
        fields = [self._constant_unit_cinf(g, w) for g in grids]
        expected = 1.0 / (math.e * (math.e - 1.0))
        assert annulus_norm(fields, w, 0, n_max) == pytest.approx(expected, abs=1e-6)

    def test_single_supported_shell(self):
        from bspde.domains import annulus_family

        w = NormWeights(k_max=15)
        b = 1
        grids = annulus_family(b, b + 2, 1, 4)
        v = 3.0
        fields = [GriddedField.constant(grids[0], v)] + [
            GriddedField.constant(g, 0.0) for g in grids[1:]
        ]
        got = annulus_norm(fields, w, b, b + 2)
        expected = math.exp(-(b + 2)) * cinf_norm(GriddedField.constant(grids[0], v), w)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_nmax_not_above_b_rejected(self):
        w = NormWeights()
        with pytest.raises(ConfigurationError):
            annulus_norm([], w, 2, 2)


# ---------------------------------------------------------------------------
# norm properties on randomized fields
# ---------------------------------------------------------------------------

class TestNormProperties:
    def _random_field(self, g, rng):
        vals = rng.normal(size=(g.n_nodes, 1))
        return GriddedField(g, vals)

    def test_homogeneity(self):
        g = grid_1d(0, 2, 9)
        w = NormWeights(k_max=6)
        rng = np.random.default_rng(7)
        for _ in range(25):
            f = self._random_field(g, rng)
            alpha = rng.uniform(-3, 3)
            fa = GriddedField(g, alpha * f.values)
            assert ck_norm(fa, 2) == pytest.approx(abs(alpha) * ck_norm(f, 2), rel=1e-12)
            assert cinf_norm(fa, w) == pytest.approx(abs(alpha) * cinf_norm(f, w), rel=1e-12)

    def test_triangle_inequality(self):
        g = grid_1d(0, 2, 9)
        w = NormWeights(k_max=6)
        rng = np.random.default_rng(8)
        for _ in range(25):
            f, h = self._random_field(g, rng), self._random_field(g, rng)
            fh = GriddedField(g, f.values + h.values)
            assert ck_norm(fh, 2) <= ck_norm(f, 2) + ck_norm(h, 2) + 1e-12
            assert cinf_norm(fh, w) <= cinf_norm(f, w) + cinf_norm(h, w) + 1e-12


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

class TestCsvExport:
    def test_header_and_derivative_suffix(self):
        g = grid_1d(0, 1, 5)
        f = GriddedField.from_function(g, lambda x: x[:, 0] ** 2)
        header, rows = field_to_csv_rows(f, derivative_orders=[(1,)])
        assert header == ["x1", "v1", "v1_d1"]
        assert rows.shape == (5, 3)
        # derivative column agrees with the cached derivative field
        assert np.allclose(rows[:, 2], f.derivative((1,)).values[:, 0])
