"""Two-asset market with a random factor: the end-to-end closed-form oracle.

A risk-free account, one stock whose drift/volatility load on a diffusive
factor Y, and a CRRA investor maximizing terminal utility of present-value
wealth.  The value function solves a strongly nonlinear backward equation in
the wealth variable; a power ansatz reduces it to a linear parabolic PDE for
a factor surface f(t, y), giving closed-form V and Vbar to validate the
regression solver against, plus the optimal feedback portfolio.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.interpolate import RegularGridInterpolator

from .drivers import FAMILY_WEALTH, DriverPaths, LevySpec, TimeGrid, path_rng, simulate_drivers
from .fields import ConfigurationError, DomainSpec, GriddedField, ModelDims, SpatialGrid, make_grid
from .operators import OperatorPair, TripletView
from .picard import (
    PicardConfig,
    PicardDiagnostics,
    RegressionBasis,
    TerminalCondition,
    TripletSeries,
    gamma_rule,
    picard_solve,
    reconstruct_forward,
)


class SingularityError(RuntimeError):
    """Raised when the concavity of the value function degenerates."""


class ConcavityError(RuntimeError):
    """Raised when V_xx fails to be negative where a policy is requested."""


def _as_fn(coeff) -> Callable[[np.ndarray], np.ndarray]:
    if callable(coeff):
        return lambda y: np.asarray(coeff(np.asarray(y, dtype=float)), dtype=float)
    return lambda y: np.full_like(np.asarray(y, dtype=float), float(coeff))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class FinanceModel:
    """Market coefficients and investor parameters.

    beta, sigma are the stock drift/volatility as functions of the factor;
    c, d drive the factor; rho correlates the factor with the stock noise;
    gamma_risk is the CRRA exponent; b the bankruptcy level on present-value
    wealth; kappa the volatility floor.
    """

    r: float = 0.0
    beta: object = 0.05
    sigma: object = 0.2
    c: object = 0.0
    d: object = 0.0
    rho: float = 0.0
    gamma_risk: float = 0.5
    b: float = 1.0
    kappa: float = 1e-4
    T: float = 1.0
    x0: float = 2.0
    y0: float = 0.0
    x_max: float | None = None

    def __post_init__(self):
        if not 0 < self.gamma_risk < 1:
            raise ConfigurationError("gamma_risk must lie in (0, 1)")
        if not abs(self.rho) < 1:
            raise ConfigurationError("rho must lie in (-1, 1)")
        if self.b < 1:
            raise ConfigurationError("bankruptcy level b must be >= 1")
        if self.kappa <= 0:
            raise ConfigurationError("volatility floor kappa must be positive")
        if self.x_max is None:
            self.x_max = 10.0 * self.x0
        self._beta = _as_fn(self.beta)
        self._sigma = _as_fn(self.sigma)
        self._c = _as_fn(self.c)
        self._d = _as_fn(self.d)

    def sigma_at(self, y) -> np.ndarray:
        s = self._sigma(y)
        if np.any(s < self.kappa):
            raise ConfigurationError(
                f"sigma(y) drops below the floor kappa={self.kappa} on the evaluation set"
            )
        return s

    def lambda_mkt(self, y) -> np.ndarray:
        """Market price of risk (beta(y) - r) / sigma(y)."""
        return (self._beta(y) - self.r) / self.sigma_at(y)

    @property
    def delta(self) -> float:
        """Distortion exponent (1-gamma) / (1-gamma + rho^2 gamma); 1 iff rho = 0."""
        g = self.gamma_risk
        return (1 - g) / (1 - g + self.rho ** 2 * g)

    def utility(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) ** self.gamma_risk / self.gamma_risk

    def factor_paths(self, drivers: DriverPaths) -> np.ndarray:
        """Euler factor paths Y (n_paths, n_steps+1) from the shared noise.

        dY = c(Y) dt + d(Y) (rho dW1 + sqrt(1-rho^2) dW2); adapted to the
        driver filtration by construction.
        """
        n = drivers.grid.n_steps
        dt = drivers.grid.dt
        y = np.empty((drivers.n_paths, n + 1))
        y[:, 0] = self.y0
        rho_c = math.sqrt(1 - self.rho ** 2)
        for j in range(n):
            dwy = self.rho * drivers.dW[:, j, 0] + rho_c * drivers.dW[:, j, 1]
            yj = y[:, j]
            y[:, j + 1] = yj + self._c(yj) * dt + self._d(yj) * dwy
        return y


# ---------------------------------------------------------------------------
# the factor surface
# ---------------------------------------------------------------------------

@dataclass
class FSurface:
    """Solution f(t, y) of the linear factor PDE, with the derived quantities."""

    times: np.ndarray       # (n_t+1,)
    ygrid: np.ndarray       # (n_y,)
    f: np.ndarray           # (n_t+1, n_y)
    delta: float
    model: FinanceModel

    @property
    def f_y(self) -> np.ndarray:
        if self.ygrid.size == 1:
            return np.zeros_like(self.f)
        return np.gradient(self.f, self.ygrid, axis=1, edge_order=2)

    def _eval(self, surface: np.ndarray, t, y) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        t, y = np.broadcast_arrays(t, y)
        if self.ygrid.size == 1:
            return np.interp(t, self.times, surface[:, 0])
        rgi = RegularGridInterpolator((self.times, self.ygrid), surface, method="linear",
                                      bounds_error=False, fill_value=None)
        return rgi(np.stack([t, y], axis=-1))

    def at(self, t, y) -> np.ndarray:
        return self._eval(self.f, t, y)

    def fy_at(self, t, y) -> np.ndarray:
        return self._eval(self.f_y, t, y)


def solve_f_pde(model: FinanceModel, tgrid: TimeGrid, ygrid: np.ndarray) -> FSurface:
    """Crank-Nicolson backward solve of the factor PDE from f(T, .) = 1.

    f_t + d^2 f_yy / 2 + (c + rho gamma lam d / (1-gamma)) f_y
        + gamma lam^2 f / (2 delta (1-gamma)) = 0,
    with zero-slope lateral boundaries (ghost-node reflection).  Raises when
    the scheme loses positivity, which signals a too-coarse grid.
    """
    ygrid = np.atleast_1d(np.asarray(ygrid, dtype=float))
    n_y = ygrid.size
    n_t = tgrid.n_steps
    g = model.gamma_risk
    delta = model.delta
    lam = model.lambda_mkt(ygrid)
    dcoef = model._d(ygrid)
    adv = model._c(ygrid) + model.rho * g * lam * dcoef / (1 - g)
    react = g * lam ** 2 / (2 * delta * (1 - g))

    f = np.ones((n_t + 1, n_y))
    if n_y == 1:
        # no factor dependence: plain scalar ODE via the same CN weights
        rate = float(react[0])
        for j in range(n_t - 1, -1, -1):
            dt = tgrid.dt
            f[j, 0] = f[j + 1, 0] * (1 + dt * rate / 2) / (1 - dt * rate / 2)
        return FSurface(times=tgrid.times, ygrid=ygrid, f=f, delta=delta, model=model)

    dy = float(ygrid[1] - ygrid[0])
    diff = 0.5 * dcoef ** 2
    lower = np.zeros(n_y)
    main = np.zeros(n_y)
    upper = np.zeros(n_y)
    main[:] = -2 * diff / dy ** 2 + react
    lower[:] = diff / dy ** 2 - adv / (2 * dy)
    upper[:] = diff / dy ** 2 + adv / (2 * dy)
    # zero-slope boundaries: reflect the ghost node into the inner neighbor
    upper[0] += lower[0]
    lower[0] = 0.0
    lower[-1] += upper[-1]
    upper[-1] = 0.0

    dt = tgrid.dt
    # (I - dt/2 A) f^j = (I + dt/2 A) f^{j+1}
    ab = np.zeros((3, n_y))
    ab[0, 1:] = -0.5 * dt * upper[:-1]
    ab[1, :] = 1.0 - 0.5 * dt * main
    ab[2, :-1] = -0.5 * dt * lower[1:]
    for j in range(n_t - 1, -1, -1):
        rhs = f[j + 1] + 0.5 * dt * (
            main * f[j + 1]
            + np.concatenate([[0.0], lower[1:] * f[j + 1][:-1]])
            + np.concatenate([upper[:-1] * f[j + 1][1:], [0.0]])
        )
        f[j] = scipy.linalg.solve_banded((1, 1), ab, rhs)
        if (f[j] <= 0).any():
            raise ConfigurationError(
                f"factor surface lost positivity at step {j}; refine the (t, y) grid"
            )
    return FSurface(times=tgrid.times, ygrid=ygrid, f=f, delta=delta, model=model)


# ---------------------------------------------------------------------------
# closed form
# ---------------------------------------------------------------------------

@dataclass
class ClosedFormValue:
    """Closed-form value surface V(t, x, y) = x^gamma f(t,y)^delta / gamma and its Vbar pair."""

    times: np.ndarray
    xgrid: np.ndarray
    ygrid: np.ndarray
    V: np.ndarray      # (n_t+1, n_x, n_y)
    Vbar: np.ndarray   # (n_t+1, n_x, n_y, 2)


def closed_form_value(model: FinanceModel, fsurf: FSurface, xgrid: np.ndarray) -> ClosedFormValue:
    """Evaluate the power-ansatz solution and its diffusion integrands.

    Both Vbar components carry the x^gamma factor (dimensional consistency
    with V; confirmed numerically by the solver cross-check):

        Vbar1 = rho delta / gamma * x^gamma d(y) f_y f^{delta-1}
        Vbar2 = delta sqrt(1-rho^2) / gamma * x^gamma d(y) f_y f^{delta-1}
    """
    xgrid = np.asarray(xgrid, dtype=float)
    if (xgrid <= 0).any():
        raise ConfigurationError("wealth grid must be strictly positive")
    g = model.gamma_risk
    delta = fsurf.delta
    xg = xgrid ** g
    f = fsurf.f
    fy = fsurf.f_y
    dvals = model._d(fsurf.ygrid)
    V = xg[None, :, None] * (f ** delta)[:, None, :] / g
    hedge = dvals[None, :] * fy * f ** (delta - 1)  # (n_t+1, n_y)
    vb1 = model.rho * delta / g * xg[None, :, None] * hedge[:, None, :]
    vb2 = delta * math.sqrt(1 - model.rho ** 2) / g * xg[None, :, None] * hedge[:, None, :]
    Vbar = np.stack([vb1, vb2], axis=-1)
    return ClosedFormValue(times=fsurf.times, xgrid=xgrid, ygrid=fsurf.ygrid, V=V, Vbar=Vbar)


# ---------------------------------------------------------------------------
# the strongly nonlinear operator
# ---------------------------------------------------------------------------

def build_fbspde_operator(model: FinanceModel, factor_paths: np.ndarray | None = None,
                          vxx_floor: float = 1e-8, log_wealth: bool = False) -> OperatorPair:
    """Wealth-equation operator for the backward solver.

    Drift: -(V_x lam_mkt + Vbar1_x)^2 / (2 V_xx), diffusion J = 0.  The sign
    makes the drift nonnegative on concave fields, consistent with the
    solver's backward convention (value decays toward the terminal utility);
    it is the convention under which the closed-form pair reproduces the
    equation (verified against the ansatz by direct expansion).

    With `log_wealth` the grid coordinate is z = log x and the same drift is
    expressed through z-derivatives (the x factors cancel):

        drift = -(lam V_z + Vbar1_z)^2 / (2 (V_zz - V_z)).

    This form has x-uniform curvature sensitivity lam^2/(2(1-gamma)^2) and a
    geometric derivative ladder for the power ansatz, which keeps the
    derivative-feedback iteration stable; the raw-x form is kept for
    pointwise evaluation at mild resolutions.

    `factor_paths` carries Y per path/step; omitted, the factor is frozen at
    y0.  A breach of the relative concavity floor raises SingularityError
    naming the node: the closed form guarantees strict concavity, so a breach
    means the solve has degenerated and must not be clamped over.
    """

    def y_at(view: TripletView) -> np.ndarray:
        if factor_paths is None or view.j is None:
            return np.asarray(model.y0, dtype=float)
        return factor_paths[:, view.j]

    def check_concavity(curv: np.ndarray, view: TripletView, what: str) -> None:
        scale = np.abs(curv).max()
        if scale <= 0 or (np.abs(curv) < vxx_floor * scale).any():
            flat = np.abs(curv).min(axis=tuple(range(curv.ndim - 2)) + (curv.ndim - 1,))
            node = int(np.argmin(flat))
            raise SingularityError(
                f"concavity degenerate: |{what}| below {vxx_floor:g} of scale at node {node} "
                f"(grid coordinate {view.grid.nodes[node]})"
            )

    def drift(view: TripletView) -> np.ndarray:
        y = y_at(view)
        lam = model.lambda_mkt(y)
        lam = lam[..., None, None] if np.ndim(lam) else float(lam)
        v1 = view.V_derivative((1,))
        v2 = view.V_derivative((2,))
        vb1 = view.Vbar_derivative((1,))[..., 0]
        if log_wealth:
            curv = v2 - v1
        else:
            curv = v2
        check_concavity(curv, view, "V_zz - V_z" if log_wealth else "V_xx")
        num = v1 * lam + vb1
        return -(num ** 2) / (2 * curv)

    def diffusion(view: TripletView) -> np.ndarray:
        return np.zeros(view.V().shape + (2,))

    lam_scale = float(np.abs(model.lambda_mkt(np.atleast_1d(model.y0))).max())
    if log_wealth:
        # curvature sensitivity lam^2/(2(1-gamma)^2), uniform in wealth
        k_d = max(0.25, lam_scale ** 2 / (2 * (1 - model.gamma_risk) ** 2))
    else:
        # d(drift)/d(V_xx) ~ lam^2 x^2 / (2 (1-gamma)^2) dominates on [b, x_max]
        k_d = max(0.25, lam_scale ** 2 * model.x_max ** 2 / (2 * (1 - model.gamma_risk) ** 2))
    tag = "deterministic" if factor_paths is None else "path-functional"
    return OperatorPair(drift=drift, diffusion=diffusion, k=2, m=1, K_D=k_d,
                        adaptedness_tag=tag, name="wealth-value")


# ---------------------------------------------------------------------------
# optimal portfolio and wealth simulation
# ---------------------------------------------------------------------------

@dataclass
class PortfolioPolicy:
    """Feedback allocations on a (t, x) grid: riskless and risky present values.

    pi[j, i] = (pi0, pi1) at (t_j, x_i); pi1 follows the feedback formula,
    pi0 = x - pi1 keeps the book self-financing; both are zero after the
    bankruptcy time by construction of the wealth simulation.
    """

    times: np.ndarray
    xgrid: np.ndarray
    pi: np.ndarray  # (n_t+1, n_x, 2)
    admissibility_tally: float = math.nan

    def risky_at(self, j: int, x: np.ndarray) -> np.ndarray:
        lo, hi = self.xgrid[0], self.xgrid[-1]
        if (x < lo - 1e-12).any() or (x > hi + 1e-12).any():
            bad = x[(x < lo - 1e-12) | (x > hi + 1e-12)][0]
            raise ExtrapolationHullError(
                f"wealth {bad:.6g} left the policy grid hull [{lo:.6g}, {hi:.6g}] at step {j}"
            )
        return np.interp(x, self.xgrid, self.pi[j, :, 1])


class ExtrapolationHullError(RuntimeError):
    """Raised when simulated wealth leaves the policy grid."""


def _fd_first(vals: np.ndarray, xgrid: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.gradient(vals, xgrid, axis=axis, edge_order=2)


def _fd_second(vals: np.ndarray, xgrid: np.ndarray) -> np.ndarray:
    """Three-point second difference along the last axis, nonuniform spacing.

    Exact on quadratics everywhere; end nodes reuse the adjacent interior
    stencil (iterating first differences would lose an order at the ends).
    """
    x = np.asarray(xgrid, dtype=float)
    hm = np.diff(x)[:-1]
    hp = np.diff(x)[1:]
    f0 = vals[..., :-2]
    f1 = vals[..., 1:-1]
    f2 = vals[..., 2:]
    interior = 2 * (f0 * hp - f1 * (hm + hp) + f2 * hm) / (hm * hp * (hm + hp))
    out = np.empty_like(vals)
    out[..., 1:-1] = interior
    out[..., 0] = interior[..., 0]
    out[..., -1] = interior[..., -1]
    return out


def optimal_portfolio(times: np.ndarray, xgrid: np.ndarray, V: np.ndarray,
                      model: FinanceModel, Vbar1: np.ndarray | None = None,
                      y_of_t: np.ndarray | float | None = None) -> PortfolioPolicy:
    """Feedback portfolio pi1 = -(V_x lam + Vbar1_x) / (sigma V_xx) on the grid.

    `V` (and optionally `Vbar1`) are (n_t+1, n_x) surfaces over a strictly
    increasing (possibly nonuniform) wealth grid; `y_of_t` supplies the factor
    level per time for the coefficient loadings.  Requires strict concavity on
    the whole evaluation set.
    """
    xgrid = np.asarray(xgrid, dtype=float)
    vx = _fd_first(V, xgrid)
    vxx = _fd_second(V, xgrid)
    if (vxx >= 0).any():
        j, i = np.argwhere(vxx >= 0)[0]
        raise ConcavityError(f"V_xx >= 0 at t index {j}, x = {xgrid[i]:.6g}")
    y = model.y0 if y_of_t is None else y_of_t
    y_arr = np.broadcast_to(np.asarray(y, dtype=float), (len(times),))
    lam = model.lambda_mkt(y_arr)[:, None]
    sig = model.sigma_at(y_arr)[:, None]
    num = vx * lam
    if Vbar1 is not None:
        num = num + _fd_first(Vbar1, xgrid)
    pi1 = -num / (sig * vxx)
    pi0 = xgrid[None, :] - pi1
    return PortfolioPolicy(times=np.asarray(times, float), xgrid=xgrid,
                           pi=np.stack([pi0, pi1], axis=-1))


@dataclass
class WealthPaths:
    """Simulated present-value wealth under a policy, with bankruptcy times."""

    grid: TimeGrid
    X: np.ndarray          # (n_paths, n_steps+1)
    tau: np.ndarray
    tau_index: np.ndarray
    admissibility_tally: float


def simulate_wealth(policy: PortfolioPolicy, model: FinanceModel, tgrid: TimeGrid,
                    n_paths: int, seed: int, drivers: DriverPaths | None = None,
                    factor_paths: np.ndarray | None = None) -> WealthPaths:
    """Euler wealth paths dX = sigma pi1 (lam dt + dW1) with bankruptcy stopping.

    The policy is frozen to zero from the first grid time X < b on; the
    admissibility tally reports the sample mean of int (pi1 sigma)^2 dt.
    """
    n = tgrid.n_steps
    dt = tgrid.dt
    if drivers is not None:
        dw1 = drivers.dW[:, :, 0]
    else:
        dw1 = np.empty((n_paths, n))
        s = math.sqrt(dt)
        for i in range(n_paths):
            g = path_rng(seed, FAMILY_WEALTH, i)
            dw1[i] = g.normal(0.0, s, size=n)
    X = np.empty((n_paths, n + 1))
    X[:, 0] = model.x0
    stopped = X[:, 0] < model.b
    tau_index = np.full(n_paths, n, dtype=int)
    tau_index[stopped] = 0
    tally = 0.0
    for j in range(n):
        x = X[:, j]
        pi1 = np.zeros(n_paths)
        live = ~stopped
        if live.any():
            pi1[live] = policy.risky_at(j, x[live])
        y = model.y0 if factor_paths is None else factor_paths[:, j]
        lam = np.broadcast_to(np.asarray(model.lambda_mkt(y), float), (n_paths,))
        sig = np.broadcast_to(np.asarray(model.sigma_at(y), float), (n_paths,))
        expo = sig * pi1
        tally += float(np.mean(expo ** 2)) * dt
        # stopped paths have pi1 = 0, so they stay frozen automatically
        X[:, j + 1] = x + expo * (lam * dt + dw1[:, j])
        newly = (~stopped) & (X[:, j + 1] < model.b)
        tau_index[newly] = j + 1
        stopped |= newly
    tau = tgrid.times[tau_index]
    return WealthPaths(grid=tgrid, X=X, tau=tau, tau_index=tau_index,
                       admissibility_tally=tally)


# ---------------------------------------------------------------------------
# end-to-end validation against the closed form
# ---------------------------------------------------------------------------

@dataclass
class ValidationConfig:
    """Resolution knobs of the closed-form cross-check.

    The wealth equation is solved in log-wealth coordinates (see
    build_fbspde_operator); `dx` is the log-grid step and `x_filter_degree`
    the spatial polynomial filter applied to the fitted fields.
    """

    n_steps: int = 64
    dx: float = 1.0 / 64
    n_paths: int = 10000
    seed: int = 20260801
    eval_x_max: float | None = None   # error window [b, eval_x_max]; default 5*x0
    basis_degree: int = 2
    max_iters: int = 30
    rel_tol: float = 1e-6
    x_filter_degree: int = 8
    norm_k_max: int = 1
    n_y: int = 81                     # factor grid for the f-PDE
    y_span: float = 4.0               # halfwidth in factor stddevs
    tau_paths: int = 2000


@dataclass
class FinanceValidationReport:
    """Outcome of one solver-versus-closed-form run."""

    converged: bool
    diverged: bool
    iterations: int
    deltas: list[float]
    ratios: list[float | None]
    max_rel_err_V: float
    max_abs_err_Vbar: tuple[float, float]
    vbar1_max_abs: float
    vbar2_max_abs: float
    forward_rms: float
    tau_mean: float
    tau_stopped_fraction: float
    admissibility_tally: float
    runtime_s: float
    gamma: float
    n_steps: int
    n_x: int
    n_paths: int

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "diverged": self.diverged,
            "iterations": self.iterations,
            "deltas": self.deltas,
            "ratios": self.ratios,
            "max_rel_err_V": self.max_rel_err_V,
            "max_abs_err_Vbar": list(self.max_abs_err_Vbar),
            "vbar1_max_abs": self.vbar1_max_abs,
            "vbar2_max_abs": self.vbar2_max_abs,
            "forward_rms": self.forward_rms,
            "tau_mean": self.tau_mean,
            "tau_stopped_fraction": self.tau_stopped_fraction,
            "admissibility_tally": self.admissibility_tally,
            "runtime_s": self.runtime_s,
            "gamma": self.gamma,
            "n_steps": self.n_steps,
            "n_x": self.n_x,
            "n_paths": self.n_paths,
        }


def _factor_grid(model: FinanceModel, vcfg: ValidationConfig) -> np.ndarray:
    d0 = float(np.abs(model._d(np.atleast_1d(model.y0))).max())
    if d0 == 0:
        return np.atleast_1d(np.asarray(model.y0, dtype=float))
    span = vcfg.y_span * d0 * math.sqrt(model.T) + abs(float(model._c(np.atleast_1d(model.y0))[0])) * model.T
    return np.linspace(model.y0 - span, model.y0 + span, vcfg.n_y)


def validate_finance(model: FinanceModel, vcfg: ValidationConfig | None = None
                     ) -> tuple[FinanceValidationReport, TripletSeries, ClosedFormValue]:
    """Run the backward solver on the wealth equation and compare to the closed form.

    Solves with terminal utility x^gamma/gamma over [b, x_max], evaluates the
    power-ansatz solution along the shared factor paths, and reports the max
    relative V error and absolute Vbar errors on the window [b, eval_x_max],
    contraction diagnostics, the forward-reconstruction residual and
    bankruptcy statistics under the closed-form feedback policy.
    """
    vcfg = vcfg or ValidationConfig()
    t_start = time.perf_counter()
    g = model.gamma_risk
    tgrid = TimeGrid(T=model.T, n_steps=vcfg.n_steps)
    # log-wealth grid: uniform in z = log x over [log b, log x_max]
    z_lo, z_hi = math.log(model.b), math.log(model.x_max)
    n_x = int(round((z_hi - z_lo) / vcfg.dx)) + 1
    grid = make_grid(DomainSpec.box([[z_lo, z_hi]], n_x))
    xgrid = np.exp(grid.nodes[:, 0])
    dims = ModelDims(p=1, q=1, d=2, h=0)
    drivers = simulate_drivers(dims, tgrid, LevySpec.none(), vcfg.seed, vcfg.n_paths)
    ypaths = model.factor_paths(drivers)

    fsurf = solve_f_pde(model, tgrid, _factor_grid(model, vcfg))
    closed = closed_form_value(model, fsurf, xgrid)

    op = build_fbspde_operator(model, factor_paths=ypaths, log_wealth=True)
    gamma = gamma_rule(op.K_D, model.T)
    cfg = PicardConfig(gamma=gamma, max_iters=vcfg.max_iters, rel_tol=vcfg.rel_tol,
                       basis=RegressionBasis(degree=vcfg.basis_degree), initial="terminal",
                       x_filter_degree=vcfg.x_filter_degree, norm_k_max=vcfg.norm_k_max)
    H = TerminalCondition.deterministic(lambda z: model.utility(np.exp(z[:, 0])))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol, diag = picard_solve(op, H, drivers, cfg, grid, dims)

    window = xgrid <= (vcfg.eval_x_max if vcfg.eval_x_max is not None else 5.0 * model.x0) + 1e-12
    xg = xgrid ** g
    dvals_path = model._d(ypaths)
    err_v = 0.0
    err_vb = [0.0, 0.0]
    vb_mag = [0.0, 0.0]
    rho_c = math.sqrt(1 - model.rho ** 2)
    for j in range(tgrid.n_steps + 1):
        t = tgrid.times[j]
        fj = fsurf.at(t, ypaths[:, j])
        exact_v = xg[None, :] * (fj ** fsurf.delta)[:, None] / g
        num_v = sol.v_values(j)[:, :, 0]
        err_v = max(err_v, float(np.abs((num_v - exact_v)[:, window] / exact_v[:, window]).max()))
        if j < tgrid.n_steps:
            fyj = fsurf.fy_at(t, ypaths[:, j])
            hedge = dvals_path[:, j] * fyj * fj ** (fsurf.delta - 1)
            exact_b1 = model.rho * fsurf.delta / g * xg[None, :] * hedge[:, None]
            exact_b2 = rho_c * fsurf.delta / g * xg[None, :] * hedge[:, None]
            num_b = sol.vbar_values(j)[:, :, 0, :]
            mean_b = num_b.mean(axis=0)
            err_vb[0] = max(err_vb[0], float(np.abs((num_b[:, :, 0] - exact_b1)[:, window]).mean(axis=0).max()))
            err_vb[1] = max(err_vb[1], float(np.abs((num_b[:, :, 1] - exact_b2)[:, window]).mean(axis=0).max()))
            vb_mag[0] = max(vb_mag[0], float(np.abs(mean_b[window, 0]).max()))
            vb_mag[1] = max(vb_mag[1], float(np.abs(mean_b[window, 1]).max()))

    _, fwd_rms = reconstruct_forward(sol, op, drivers)

    policy = optimal_portfolio(tgrid.times, xgrid, closed.V[:, :, _nearest(fsurf.ygrid, model.y0)],
                               model,
                               Vbar1=closed.Vbar[:, :, _nearest(fsurf.ygrid, model.y0), 0],
                               y_of_t=model.y0)
    wealth = simulate_wealth(policy, model, tgrid, vcfg.tau_paths, vcfg.seed + 1)

    report = FinanceValidationReport(
        converged=diag.converged,
        diverged=diag.diverged,
        iterations=diag.iterations,
        deltas=diag.deltas,
        ratios=diag.ratios,
        max_rel_err_V=err_v,
        max_abs_err_Vbar=(err_vb[0], err_vb[1]),
        vbar1_max_abs=vb_mag[0],
        vbar2_max_abs=vb_mag[1],
        forward_rms=fwd_rms,
        tau_mean=float(wealth.tau.mean()),
        tau_stopped_fraction=float((wealth.tau_index < tgrid.n_steps).mean()),
        admissibility_tally=wealth.admissibility_tally,
        runtime_s=time.perf_counter() - t_start,
        gamma=gamma,
        n_steps=tgrid.n_steps,
        n_x=len(xgrid),
        n_paths=vcfg.n_paths,
    )
    return report, sol, closed


def _nearest(grid: np.ndarray, value: float) -> int:
    return int(np.argmin(np.abs(np.asarray(grid) - value)))
