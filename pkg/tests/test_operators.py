import numpy as np
import pytest

from bspde.fields import (
    DomainSpec,
    FieldTriplet,
    GriddedField,
    ModelDims,
    make_grid,
)
from bspde.operators import (
    LinearCoefficients,
    OperatorError,
    OperatorPair,
    build_linear_operator,
    estimate_lipschitz,
    eval_diffusion,
    eval_drift,
    scaled_operator,
    zero_operator,
)


def setup_1d(n=17, lo=0.0, hi=1.0, d=1):
    grid = make_grid(DomainSpec.box([[lo, hi]], n))
    dims = ModelDims(p=1, q=1, d=d, h=0)
    return grid, dims


def triplet_from(grid, dims, fn, vbar_fn=None):
    v = GriddedField.from_function(grid, fn)
    if vbar_fn is None:
        vbar = GriddedField.constant(grid, 0.0, (dims.q, dims.d))
    else:
        vals = np.stack([vbar_fn(grid.nodes)] * dims.d, axis=-1)[:, None, :]
        vbar = GriddedField(grid, vals.reshape(grid.n_nodes, dims.q, dims.d))
    return FieldTriplet(V=v, Vbar=vbar, Vtilde=())


class TestLinearDrift:
    def test_all_zero_coefficients(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1), dims, grid)
        t = triplet_from(grid, dims, lambda x: np.sin(x[:, 0]))
        assert np.abs(eval_drift(op, 0.0, t, dims).values).max() == 0.0
        assert np.abs(eval_diffusion(op, 0.0, t, dims).values).max() == 0.0

    def test_multiplication_operator(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1, c=1.0), dims, grid)
        t = triplet_from(grid, dims, lambda x: np.full(len(x), 5.0))
        out = eval_drift(op, 0.0, t, dims)
        assert np.allclose(out.values, 5.0)

    def test_second_derivative_term_exact_on_quadratic(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1, a={(0, 0): 1.0}), dims, grid)
        t = triplet_from(grid, dims, lambda x: x[:, 0] ** 2)
        out = eval_drift(op, 0.0, t, dims)
        assert np.abs(out.values - 2.0).max() < 1e-10

    def test_heat_type_laplacian(self):
        grid = make_grid(DomainSpec.box([[0, 1], [0, 1]], 9))
        dims = ModelDims(p=2, q=1, d=1, h=0)
        coeffs = LinearCoefficients(p=2, a={(0, 0): 0.5, (1, 1): 0.5})
        op = build_linear_operator(coeffs, dims, grid)
        t = FieldTriplet(
            V=GriddedField.from_function(grid, lambda x: x[:, 0] ** 2 + x[:, 1] ** 2),
            Vbar=GriddedField.constant(grid, 0.0, (1, 1)),
        )
        out = eval_drift(op, 0.0, t, dims)
        # sum of second partials of x^2 + y^2 is 4; halved by the coefficients
        assert np.abs(out.values - 2.0).max() < 1e-10

    def test_sign_of_zeroth_order(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1, c=-1.0), dims, grid)
        t = triplet_from(grid, dims, lambda x: 1 + x[:, 0])
        out = eval_drift(op, 0.0, t, dims)
        assert np.allclose(out.values[:, 0], -(1 + grid.nodes[:, 0]))


class TestLinearDiffusion:
    def test_identity_replicated_over_columns(self):
        grid, dims = setup_1d(d=2)
        op = build_linear_operator(LinearCoefficients(p=1, c=1.0), dims, grid)
        t = triplet_from(grid, dims, lambda x: np.ones(len(x)))
        out = eval_diffusion(op, 0.0, t, dims)
        assert out.values.shape == (grid.n_nodes, 1, 2)
        assert np.allclose(out.values, 1.0)

    def test_first_derivative_exact_on_linear(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1, b={0: 1.0}), dims, grid)
        t = triplet_from(grid, dims, lambda x: 3 * x[:, 0])
        out = eval_diffusion(op, 0.0, t, dims)
        assert np.abs(out.values - 3.0).max() < 1e-10


class TestOperatorContracts:
    def test_linearity_to_round_off(self):
        grid, dims = setup_1d()
        coeffs = LinearCoefficients(p=1, a={(0, 0): 0.3}, b={0: -0.7}, c=1.1)
        op = build_linear_operator(coeffs, dims, grid)
        rng = np.random.default_rng(3)
        u = triplet_from(grid, dims, lambda x: np.sin(2 * x[:, 0]))
        v = triplet_from(grid, dims, lambda x: np.cos(x[:, 0]))
        a, b = 1.7, -0.4
        mix = FieldTriplet(
            V=GriddedField(grid, a * u.V.values + b * v.V.values),
            Vbar=GriddedField.constant(grid, 0.0, (1, 1)),
        )
        lhs = eval_drift(op, 0.0, mix, dims).values
        rhs = a * eval_drift(op, 0.0, u, dims).values + b * eval_drift(op, 0.0, v, dims).values
        scale = np.abs(rhs).max()
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(scale, 1.0)

    def test_determinism(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1, a={(0, 0): 1.0}, c=0.5), dims, grid)
        t1 = triplet_from(grid, dims, lambda x: np.sin(x[:, 0]))
        t2 = triplet_from(grid, dims, lambda x: np.sin(x[:, 0]))
        out1 = eval_drift(op, 0.0, t1, dims).values
        out2 = eval_drift(op, 0.0, t2, dims).values
        assert np.array_equal(out1, out2)

    def test_non_finite_output_names_node(self):
        grid, dims = setup_1d()

        def bad_drift(view):
            return view.V() / view.grid.nodes[:, 0][:, None]  # divides by zero at x = 0

        op = OperatorPair(drift=bad_drift, diffusion=lambda v: np.zeros(v.V().shape + (1,)),
                          k=0, m=0, K_D=1.0)
        t = triplet_from(grid, dims, lambda x: np.ones(len(x)))
        with pytest.raises(OperatorError, match="node"):
            eval_drift(op, 0.0, t, dims)

    def test_k_less_than_m_rejected(self):
        with pytest.raises(Exception):
            OperatorPair(drift=lambda v: v.V(), diffusion=lambda v: v.V()[..., None],
                         k=0, m=1, K_D=1.0)


class TestEstimateLipschitz:
    def _sampler(self, grid, dims, scale=1.0, seed=0):
        rng = np.random.default_rng(seed)

        def sample(trial):
            def mk():
                a, b, c = rng.uniform(-scale, scale, 3)
                return triplet_from(grid, dims, lambda x: a * np.sin(b * x[:, 0]) + c)
            return mk(), mk()

        return sample

    def test_zero_operator(self):
        grid, dims = setup_1d()
        op = zero_operator(dims)
        est = estimate_lipschitz(op, self._sampler(grid, dims), trials=5, c_max=0, dims=dims)
        assert est == 0.0

    def test_positive_homogeneity_of_ratio(self):
        grid, dims = setup_1d()
        coeffs = LinearCoefficients(p=1, a={(0, 0): 0.4}, c=0.6)
        op = build_linear_operator(coeffs, dims, grid)
        est1 = estimate_lipschitz(op, self._sampler(grid, dims, seed=4), trials=6, c_max=0, dims=dims)
        est2 = estimate_lipschitz(scaled_operator(op, 2.0), self._sampler(grid, dims, seed=4),
                                  trials=6, c_max=0, dims=dims)
        assert est2 == pytest.approx(2.0 * est1, rel=1e-12)

    def test_bounded_by_analytic_coefficient_sum(self):
        grid, dims = setup_1d()
        amp = 0.8
        coeffs = LinearCoefficients(p=1, a={(0, 0): amp}, b={0: amp}, c=amp)
        op = build_linear_operator(coeffs, dims, grid)
        est = estimate_lipschitz(op, self._sampler(grid, dims, seed=9), trials=8, c_max=1, dims=dims)
        # triangle-inequality bound: sup|coeff| times the number of terms
        assert est <= amp * 3 + 1e-12
        assert est <= op.K_D + 1e-12

    def test_identical_pair_warns_and_skips(self):
        grid, dims = setup_1d()
        op = build_linear_operator(LinearCoefficients(p=1, c=1.0), dims, grid)
        t = triplet_from(grid, dims, lambda x: np.ones(len(x)))

        with pytest.warns(RuntimeWarning, match="identical"):
            est = estimate_lipschitz(op, lambda trial: (t, t), trials=1, c_max=0, dims=dims)
        assert est == 0.0
