import math
import time

import numpy as np
import pytest

from bspde.drivers import LevyChannel, LevySpec, TimeGrid, simulate_drivers
from bspde.fields import DomainSpec, ModelDims, NormWeights, make_grid, mgamma_norm_full
from bspde.operators import (
    LinearCoefficients,
    OperatorPair,
    build_linear_operator,
    zero_operator,
)
from bspde.picard import (
    PicardConfig,
    RegressionBasis,
    RegressionContext,
    TerminalCondition,
    TripletSeries,
    gamma_rule,
    martingale_step,
    picard_solve,
    propagate_derivative_system,
    reconstruct_forward,
)


def setup(n_nodes=9, n_steps=16, n_paths=800, d=1, h_channels=0, seed=101, T=1.0,
          lo=0.0, hi=1.0, levy=None):
    grid = make_grid(DomainSpec.box([[lo, hi]], n_nodes))
    dims = ModelDims(p=1, q=1, d=d, h=h_channels)
    tgrid = TimeGrid(T=T, n_steps=n_steps)
    levy = levy if levy is not None else LevySpec.none()
    drivers = simulate_drivers(dims, tgrid, levy, seed, n_paths)
    return grid, dims, tgrid, levy, drivers


def rk4_backward(f, terminal, T, n=4096):
    """Independent oracle: V' = -f(V) integrated from V(T) = terminal."""
    dt = T / n
    v = float(terminal)
    out = [v]
    for _ in range(n):
        k1 = f(v)
        k2 = f(v + 0.5 * dt * k1)
        k3 = f(v + 0.5 * dt * k2)
        k4 = f(v + dt * k3)
        v = v + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out.append(v)
    return np.array(out[::-1])  # index j corresponds to time j*T/n


class TestMartingaleStep:
    def test_constant_martingale(self):
        # L = 0, J = 0, no jumps, deterministic terminal: V(t, x) = h(x) for
        # all t; the diffusion and jump integrands vanish
        grid, dims, tgrid, levy, drivers = setup()
        op = zero_operator(dims)
        H = TerminalCondition.deterministic(lambda x: 1 + x[:, 0] ** 2)
        cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=1))
        ctx = RegressionContext(cfg.basis, drivers)
        U = TripletSeries.zero(ctx, grid, dims, levy)
        V = martingale_step(op, H, U, drivers, cfg, ctx=ctx)
        hvals = 1 + grid.nodes[:, 0] ** 2
        for j in (0, tgrid.n_steps // 2, tgrid.n_steps):
            assert np.abs(V.v_values(j) - hvals[None, :, None]).max() < 1e-9
            assert np.abs(V.vbar_values(j)).max() < 1e-9

    def test_constant_drift_integrates_linearly(self):
        # L = 1 regardless of the iterate: V(t) = 1 - t exactly on the grid
        grid, dims, tgrid, levy, drivers = setup()

        op = OperatorPair(
            drift=lambda view: np.ones_like(view.V()),
            diffusion=lambda view: np.zeros(view.V().shape + (1,)),
            k=0, m=0, K_D=0.0,
        )
        H = TerminalCondition.deterministic(lambda x: np.zeros(len(x)))
        cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=1))
        ctx = RegressionContext(cfg.basis, drivers)
        U = TripletSeries.zero(ctx, grid, dims, levy)
        V = martingale_step(op, H, U, drivers, cfg, ctx=ctx)
        for j in range(tgrid.n_steps + 1):
            expected = 1.0 - tgrid.times[j]
            assert np.abs(V.v_values(j) - expected).max() < 1e-9

    def test_brownian_terminal_recovers_integrand(self):
        # H = W1(T): V(t) = W1(t) and the paper's dW integrand convention
        # makes Vbar = e1 (hand martingale representation)
        grid, dims, tgrid, levy, drivers = setup(d=2, n_paths=4000, seed=7)
        op = zero_operator(dims)
        H = TerminalCondition.from_terminal_state(
            lambda x, s: np.broadcast_to(s[:, 0, None, None], (s.shape[0], x.shape[0], 1)).copy())
        cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=1))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert diag.converged
        n = drivers.n_paths
        se = 3.0 * math.sqrt(2.0 / n)
        for j in (4, 8, 12):
            vbar = sol.vbar_values(j).mean(axis=0)[0, 0]
            assert abs(vbar[0] - 1.0) < se
            assert abs(vbar[1]) < se
            v = sol.v_values(j)[:, 0, 0]
            assert np.abs(v - drivers.W[:, j, 0]).max() < 0.2

    def test_terminal_anchoring_exact(self):
        grid, dims, tgrid, levy, drivers = setup(d=2, n_paths=300)
        op = zero_operator(dims)
        H = TerminalCondition.from_terminal_state(
            lambda x, s: (s[:, 0] ** 2)[:, None, None] * np.ones((1, x.shape[0], 1)))
        cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=2))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        terminal = H.evaluate(grid, dims, drivers)
        assert np.array_equal(sol.v_values(tgrid.n_steps), terminal)


class TestPicardSolve:
    def test_zero_fixed_point(self):
        grid, dims, tgrid, levy, drivers = setup(n_paths=200)
        op = zero_operator(dims)
        H = TerminalCondition.deterministic(lambda x: np.zeros(len(x)))
        cfg = PicardConfig(gamma=1.0)
        t0 = time.perf_counter()
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert time.perf_counter() - t0 < 1.0
        assert diag.converged and diag.iterations == 1
        assert diag.deltas[0] == 0.0
        w = NormWeights(k_max=2, gamma=cfg.gamma)
        assert mgamma_norm_full(sol.difference(TripletSeries.zero(sol.ctx, grid, dims, levy)),
                                w, k_max=2) < 1e-12

    def test_linear_driver_oracle(self):
        # dV/dt = -a V backward gives V(t, x) = h(x) e^{a (T - t)}
        a = 0.5
        grid, dims, tgrid, levy, drivers = setup(n_nodes=17, n_steps=32, n_paths=2000)
        op = build_linear_operator(LinearCoefficients(p=1, c=a), dims, grid)
        H = TerminalCondition.deterministic(lambda x: 1 + x[:, 0] ** 2)
        cfg = PicardConfig(gamma=gamma_rule(op.K_D, tgrid.T))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert diag.converged
        hvals = 1 + grid.nodes[:, 0] ** 2
        err = 0.0
        for j in range(tgrid.n_steps + 1):
            exact = hvals * math.exp(a * (tgrid.T - tgrid.times[j]))
            got = sol.v_values(j).mean(axis=0)[:, 0]
            err = max(err, float(np.abs((got - exact) / exact).max()))
        assert err <= 2.0 / tgrid.n_steps

    def test_contraction_ratios_decrease(self):
        grid, dims, tgrid, levy, drivers = setup(n_nodes=17, n_steps=16, n_paths=1000)
        op = build_linear_operator(LinearCoefficients(p=1, c=0.5, b={0: 0.2}), dims, grid)
        H = TerminalCondition.deterministic(lambda x: np.cos(x[:, 0]))
        cfg = PicardConfig(gamma=gamma_rule(op.K_D, tgrid.T))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert diag.converged
        assert all(r < 1 for r in diag.ratios[2:] if r is not None)
        assert math.isfinite(diag.cauchy_tail)

    def test_non_convergence_reported(self):
        grid, dims, tgrid, levy, drivers = setup(n_paths=400)
        op = build_linear_operator(LinearCoefficients(p=1, c=0.5), dims, grid)
        H = TerminalCondition.deterministic(lambda x: 1 + x[:, 0])
        cfg = PicardConfig(gamma=1.0, max_iters=1)
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert not diag.converged

    def test_divergence_aborts_with_flag(self):
        grid, dims, tgrid, levy, drivers = setup(n_paths=400)

        def exploding(view):
            return np.exp(view.V()) * 50.0

        op = OperatorPair(drift=exploding,
                          diffusion=lambda v: np.zeros(v.V().shape + (1,)),
                          k=0, m=0, K_D=50.0)
        H = TerminalCondition.deterministic(lambda x: np.ones(len(x)))
        cfg = PicardConfig(gamma=1.0, max_iters=30)
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert diag.diverged and not diag.converged

    def test_uniqueness_across_initial_iterates(self):
        grid, dims, tgrid, levy, drivers = setup(n_nodes=9, n_steps=16, n_paths=1000)
        op = build_linear_operator(LinearCoefficients(p=1, c=0.4), dims, grid)
        H = TerminalCondition.deterministic(lambda x: 1 + x[:, 0] ** 2)
        sols = []
        for initial in ("zero", "terminal"):
            cfg = PicardConfig(gamma=gamma_rule(op.K_D, tgrid.T), rel_tol=1e-9, initial=initial)
            sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
            assert diag.converged
            sols.append(sol)
        gap = max(
            float(np.abs(sols[0].v_values(j) - sols[1].v_values(j)).max())
            for j in range(tgrid.n_steps + 1)
        )
        scale = float(np.abs(sols[0].v_values(0)).max())
        assert gap <= 1e-6 * scale

    def test_adaptedness_under_future_permutation(self):
        # permuting future Brownian increments across paths must not change
        # the regression features up to the cut, nor the solution of a
        # deterministic problem at all
        grid, dims, tgrid, levy, drivers = setup(n_nodes=9, n_steps=16, n_paths=500, seed=21)
        cut = 8
        from bspde.drivers import DriverPaths

        rng = np.random.default_rng(99)
        perm = rng.permutation(drivers.n_paths)
        dw2 = drivers.dW.copy()
        dw2[:, cut:, :] = dw2[perm][:, cut:, :]
        shuffled = DriverPaths(dims, tgrid, drivers.master_seed, drivers.n_paths,
                               dW=dw2, jump_channels=[], levy=levy)
        for j in range(cut + 1):
            assert np.array_equal(drivers.state_at(j), shuffled.state_at(j))

        op = build_linear_operator(LinearCoefficients(p=1, c=0.5), dims, grid)
        H = TerminalCondition.deterministic(lambda x: 1 + x[:, 0] ** 2)
        cfg = PicardConfig(gamma=1.0, rel_tol=1e-9)
        sol_a, _ = picard_solve(op, H, drivers, cfg, grid, dims)
        sol_b, _ = picard_solve(op, H, shuffled, cfg, grid, dims)
        for j in range(tgrid.n_steps + 1):
            assert np.allclose(sol_a.v_values(j).mean(axis=0),
                               sol_b.v_values(j).mean(axis=0), atol=1e-8)

    def test_bsde_reduction_nonlinear_oracle(self):
        # k = m = 0, x-free data: the equation collapses to the scalar ODE
        # V' = -cos(V) - 0.3 V, cross-checked against an RK4 integration
        grid, dims, tgrid, levy, drivers = setup(n_nodes=5, n_steps=64, n_paths=500)

        def drift(view):
            v = view.V()
            return np.cos(v) + 0.3 * v

        op = OperatorPair(drift=drift, diffusion=lambda v: np.zeros(v.V().shape + (1,)),
                          k=0, m=0, K_D=1.3)
        H = TerminalCondition.deterministic(lambda x: np.ones(len(x)))
        cfg = PicardConfig(gamma=gamma_rule(op.K_D, tgrid.T))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert diag.converged
        oracle = rk4_backward(lambda v: math.cos(v) + 0.3 * v, 1.0, tgrid.T)
        idx = np.linspace(0, len(oracle) - 1, tgrid.n_steps + 1).astype(int)
        for j in (0, 16, 32, 48):
            got = float(sol.v_values(j).mean())
            assert abs(got - oracle[idx[j]]) < 3.0 / tgrid.n_steps


class TestJumpSolve:
    def test_subordinator_terminal(self):
        # H = L(T): V(t) = L(t) + lam int z nu(dz) (T - t) and the jump
        # integrand recovers the atom size
        levy = LevySpec(channels=(LevyChannel.from_atoms([(1.0, 1.5)], lam=1.0),))
        grid, dims, tgrid, levy, drivers = setup(n_nodes=5, n_steps=16, n_paths=4000,
                                                 d=0, h_channels=1, levy=levy, seed=31)
        op = zero_operator(dims)
        H = TerminalCondition.from_terminal_state(
            lambda x, s: np.broadcast_to(s[:, 0, None, None], (s.shape[0], x.shape[0], 1)).copy())
        cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=1))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims, levy=levy)
        assert diag.converged
        rate = levy.channels[0].mean_jump_rate
        n = drivers.n_paths
        for j in (4, 8, 12):
            expected = drivers.L[:, j, 0] + rate * (tgrid.T - tgrid.times[j])
            got = sol.v_values(j)[:, 0, 0]
            assert np.abs(got - expected).mean() < 0.1
            vt = sol.vtilde_values(j)[0].mean(axis=0)[0, 0, 0]
            assert abs(vt - 1.0) < 3.0 * 3.0 / math.sqrt(n * tgrid.dt)

    def test_forward_reconstruction_with_jumps(self):
        levy = LevySpec(channels=(LevyChannel.from_atoms([(0.8, 1.0)], lam=1.2),))
        grid, dims, tgrid, levy, drivers = setup(n_nodes=5, n_steps=16, n_paths=2000,
                                                 d=1, h_channels=1, levy=levy, seed=33)
        op = zero_operator(dims)
        H = TerminalCondition.from_terminal_state(
            lambda x, s: np.broadcast_to((s[:, 0] + s[:, 1])[:, None, None],
                                         (s.shape[0], x.shape[0], 1)).copy())
        cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=1))
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims, levy=levy)
        _, rms = reconstruct_forward(sol, op, drivers)
        assert rms < 0.5  # scheme-level residual, refined in the acceptance suite


class TestForwardReconstruction:
    def test_zero_solution(self):
        grid, dims, tgrid, levy, drivers = setup(n_paths=200)
        op = zero_operator(dims)
        H = TerminalCondition.deterministic(lambda x: np.zeros(len(x)))
        cfg = PicardConfig(gamma=1.0)
        sol, _ = picard_solve(op, H, drivers, cfg, grid, dims)
        _, rms = reconstruct_forward(sol, op, drivers)
        assert rms == 0.0

    def test_constant_martingale_round_off(self):
        grid, dims, tgrid, levy, drivers = setup(n_paths=500)
        op = zero_operator(dims)
        H = TerminalCondition.deterministic(lambda x: 2 + x[:, 0])
        cfg = PicardConfig(gamma=1.0)
        sol, _ = picard_solve(op, H, drivers, cfg, grid, dims)
        _, rms = reconstruct_forward(sol, op, drivers)
        assert rms < 1e-10

    def test_euler_order_under_refinement(self):
        # H = W1(T)^2 makes the integrand 2 W1(t) vary inside each step, so
        # the within-step Euler error sqrt(2 T dt) dominates and halves in
        # RMS when dt is quartered (a linear terminal is represented exactly
        # in discrete time and would only show flat Monte Carlo noise)
        rms_values = []
        for n_steps in (8, 32):
            grid, dims, tgrid, levy, drivers = setup(n_nodes=5, n_steps=n_steps,
                                                     n_paths=4000, d=2, seed=7)
            op = zero_operator(dims)
            H = TerminalCondition.from_terminal_state(
                lambda x, s: np.broadcast_to((s[:, 0] ** 2)[:, None, None],
                                             (s.shape[0], x.shape[0], 1)).copy())
            cfg = PicardConfig(gamma=1.0, basis=RegressionBasis(degree=2))
            sol, _ = picard_solve(op, H, drivers, cfg, grid, dims)
            _, rms = reconstruct_forward(sol, op, drivers)
            rms_values.append(rms)
        assert rms_values[1] < rms_values[0]
        # strong-order coefficient stays bounded
        assert rms_values[1] / math.sqrt(1 / 32) < 2.0 * max(rms_values[0] / math.sqrt(1 / 8), 1e-9)


class TestDerivativeSystem:
    def test_derivative_of_zero_solution(self):
        grid, dims, tgrid, levy, drivers = setup(n_paths=300)
        op = zero_operator(dims)
        H = TerminalCondition.deterministic(lambda x: np.zeros(len(x)))
        cfg = PicardConfig(gamma=1.0, c_max=1)
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert (1,) in sol.derivative_systems
        d = sol.derivative_systems[(1,)]
        assert np.abs(d.v_values(0)).max() < 1e-12

    def test_quadratic_terminal_first_derivative(self):
        # H(x) = x^2, L = J = 0: the differentiated system is the constant
        # martingale with terminal 2x
        grid, dims, tgrid, levy, drivers = setup(n_nodes=17, n_paths=500)
        h = grid.spacing[0]
        op = zero_operator(dims)
        H = TerminalCondition.deterministic(lambda x: x[:, 0] ** 2)
        cfg = PicardConfig(gamma=1.0, c_max=1)
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        d = sol.derivative_systems[(1,)]
        expected = 2 * grid.nodes[:, 0]
        for j in (0, 8, 16):
            got = d.v_values(j).mean(axis=0)[:, 0]
            assert np.abs(got - expected).max() < 10 * h ** 2

    def test_consistency_with_grid_derivative(self):
        # two routes to the same object: differentiate the solved field vs
        # solve the differentiated system
        grid, dims, tgrid, levy, drivers = setup(n_nodes=17, n_steps=16, n_paths=2000)
        h = grid.spacing[0]
        op = build_linear_operator(LinearCoefficients(p=1, c=0.5), dims, grid)
        H = TerminalCondition.deterministic(lambda x: 1 + x[:, 0] ** 2)
        cfg = PicardConfig(gamma=gamma_rule(op.K_D, tgrid.T), c_max=1)
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)
        assert diag.converged
        d_sys = sol.derivative_systems[(1,)]
        for j in (0, 8):
            route_a = sol.v_derivative_values(j, (1,)).mean(axis=0)
            route_b = d_sys.v_values(j).mean(axis=0)
            tol = max(10 * h ** 2, 3.0 * 0.05)
            assert np.abs(route_a - route_b).max() < tol
