"""Backward solver: martingale-representation steps inside a fixed-point loop.

One step maps a candidate triplet U to a new triplet V by integrating the
terminal condition backward:

    V(t_j)      = E[ V(t_{j+1}) + L(t_j, U) dt | F_j ]
    Vbar(t_j)   = J(t_j, U) + E[ V(t_{j+1}) dW_j | F_j ] / dt
    Vtilde(t_j) = E[ V(t_{j+1}) dN~_j(cell) | F_j ] / (lam nu(cell) dt)

with V(T) = H exactly on every path.  Conditional expectations are
least-squares regressions on polynomial features of the driver state
(W(t), L(t)), so each time slice of the solution is a basis expansion; the
solver stores coefficients per step plus the exact per-path terminal slice.
Spatial derivatives act on coefficients, which keeps per-path derivative
fields cheap.

The outer loop iterates the step from a zero (or terminal-propagated) start
and tracks the weighted-norm differences between consecutive iterates, their
ratios and a geometric tail estimate.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .drivers import DriverPaths, LevySpec
from .fields import (
    ConfigurationError,
    GriddedField,
    FieldTriplet,
    ModelDims,
    NormWeights,
    SpatialGrid,
    mgamma_components,
)
from .operators import OperatorPair, RestrictedDriverView, TripletView


class DivergedError(RuntimeError):
    """Raised when the backward sweep produces non-finite values."""

    def __init__(self, message: str, iteration: int | None = None, step: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step


# ---------------------------------------------------------------------------
# terminal conditions
# ---------------------------------------------------------------------------

@dataclass
class TerminalCondition:
    """Terminal data H: a function of the node and, optionally, the terminal driver state."""

    fn: Callable
    measurability_tag: str = "deterministic"

    @staticmethod
    def deterministic(fn: Callable[[np.ndarray], np.ndarray]) -> "TerminalCondition":
        """H(x) independent of the randomness; fn maps nodes (n, p) to (n,) or (n, q)."""
        return TerminalCondition(fn=fn, measurability_tag="deterministic")

    @staticmethod
    def from_terminal_state(fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "TerminalCondition":
        """H(x, state) with state = (W(T), L(T)) per path, returning (n_paths, n_nodes, q)."""
        return TerminalCondition(fn=fn, measurability_tag="terminal-state functional")

    def evaluate(self, grid: SpatialGrid, dims: ModelDims, drivers: DriverPaths) -> np.ndarray:
        if self.measurability_tag == "deterministic":
            vals = np.asarray(self.fn(grid.nodes), dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            vals = vals.reshape(grid.n_nodes, dims.q)
            out = np.broadcast_to(vals, (drivers.n_paths, grid.n_nodes, dims.q)).copy()
        else:
            state = drivers.state_at(drivers.grid.n_steps)
            out = np.asarray(self.fn(grid.nodes, state), dtype=float)
            out = out.reshape(drivers.n_paths, grid.n_nodes, dims.q)
        second_moment = float(np.mean(out ** 2))
        if not math.isfinite(second_moment):
            raise ValueError("terminal condition is not square-integrable on the sample")
        return out


# ---------------------------------------------------------------------------
# regression machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of the driver state for conditional expectations."""

    degree: int = 2
    cross_terms: bool = True
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0:
            raise ConfigurationError("basis degree must be >= 0")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be >= 0")

    def exponents(self, n_state: int) -> list[tuple[int, ...]]:
        if n_state == 0:
            return [()]
        exps: list[tuple[int, ...]] = []
        if self.cross_terms:
            def rec(prefix, remaining, budget):
                if remaining == 0:
                    exps.append(tuple(prefix))
                    return
                for e in range(budget + 1):
                    rec(prefix + [e], remaining - 1, budget - e)
            rec([], n_state, self.degree)
        else:
            exps.append((0,) * n_state)
            for i in range(n_state):
                for e in range(1, self.degree + 1):
                    exp = [0] * n_state
                    exp[i] = e
                    exps.append(tuple(exp))
        exps.sort(key=lambda e: (sum(e), e))
        return exps

    def design(self, state: np.ndarray, exponents: Sequence[tuple[int, ...]]) -> np.ndarray:
        n = state.shape[0]
        cols = []
        for exp in exponents:
            col = np.ones(n)
            for i, e in enumerate(exp):
                if e:
                    col = col * state[:, i] ** e
            cols.append(col)
        return np.stack(cols, axis=1)


class RegressionContext:
    """Per-step design matrices and factorizations, shared across iterations.

    Columns are scaled to unit sample deviation for conditioning (an affine
    reparametrization: fitted values are unchanged).  The normal equations get
    the configured ridge; if a factorization still fails the step falls back
    to the degree-reduced column subset with a warning.
    """

    def __init__(self, basis: RegressionBasis, drivers: DriverPaths):
        self.basis = basis
        self.drivers = drivers
        n_state = drivers.state_dim
        self.exponents = basis.exponents(n_state)
        self.n_basis = len(self.exponents)
        if self.n_basis > drivers.n_paths / 10:
            raise ConfigurationError(
                f"basis count {self.n_basis} exceeds n_paths/10 = {drivers.n_paths / 10:.1f}; "
                "enlarge the sample or shrink the basis"
            )
        self.Phi: list[np.ndarray] = []
        self._solve: list[Callable[[np.ndarray], np.ndarray]] = []
        for j in range(drivers.grid.n_steps + 1):
            raw = basis.design(drivers.state_at(j), self.exponents)
            scale = raw.std(axis=0)
            # degenerate features (all-zero or constant duplicates beyond the
            # intercept) carry no information: excluded from the fit entirely
            active = scale > 1e-300
            active[0] = True
            scale = np.where(active, scale, 1.0)
            scale[0] = 1.0
            phi = raw / scale
            self.Phi.append(phi)
            self._solve.append(self._factorize(phi, active, j))

    def _factorize(self, phi: np.ndarray, active: np.ndarray, j: int) -> Callable[[np.ndarray], np.ndarray]:
        n = phi.shape[0]
        ridge = self.basis.ridge

        def sub_solver(keep: np.ndarray, r: float):
            sub = phi[:, keep]
            gram = sub.T @ sub / n
            cf = scipy.linalg.cho_factor(gram + r * np.eye(int(keep.sum())), lower=True)

            def solve(b, cf=cf, keep=keep):
                out = np.zeros_like(b)
                out[keep] = scipy.linalg.cho_solve(cf, b[keep])
                return out

            return solve

        try:
            return sub_solver(active, 0.0)
        except scipy.linalg.LinAlgError:
            pass
        try:
            warnings.warn(f"step {j}: singular regression, ridge {max(ridge, 1e-10):g} added",
                          RuntimeWarning)
            return sub_solver(active, max(ridge, 1e-10))
        except scipy.linalg.LinAlgError:
            pass
        warnings.warn(f"step {j}: regression still singular, basis degree reduced", RuntimeWarning)
        keep = active & np.array([sum(e) < self.basis.degree for e in self.exponents])
        keep[0] = True
        return sub_solver(keep, max(ridge, 1e-10))

    def fit(self, j: int, target: np.ndarray) -> np.ndarray:
        """Least-squares coefficients of target (n_paths, *rest) on the step-j basis."""
        phi = self.Phi[j]
        n = phi.shape[0]
        flat = target.reshape(n, -1)
        b = phi.T @ flat / n
        coef = self._solve[j](b)
        return coef.reshape((self.n_basis,) + target.shape[1:])

    def expand(self, j: int, coef: np.ndarray) -> np.ndarray:
        """Per-path values (n_paths, *rest) of a coefficient block at step j."""
        flat = coef.reshape(self.n_basis, -1)
        return (self.Phi[j] @ flat).reshape((self.Phi[j].shape[0],) + coef.shape[1:])


# ---------------------------------------------------------------------------
# the time-indexed solution triplet
# ---------------------------------------------------------------------------

class TripletSeries:
    """Time-indexed (V, Vbar, Vtilde) in regression-compact storage.

    Per interior step the three fields are basis expansions (coefficients per
    node and component); the terminal V slice is stored densely per path so
    the terminal condition is met exactly.  Values, spatial derivatives and
    path averages are materialized on demand.
    """

    def __init__(self, ctx: RegressionContext, grid: SpatialGrid, dims: ModelDims,
                 levy: LevySpec, v_coef: np.ndarray, v_terminal: np.ndarray,
                 vbar_coef: np.ndarray, vtilde_coef: list[np.ndarray]):
        self.ctx = ctx
        self.grid = grid
        self.dims = dims
        self.levy = levy
        self.v_coef = v_coef            # (n_steps, nb, n_nodes, q)
        self.v_terminal = v_terminal    # (n_paths, n_nodes, q)
        self.vbar_coef = vbar_coef      # (n_steps, nb, n_nodes, q, d)
        self.vtilde_coef = vtilde_coef  # per channel (n_steps, nb, n_nodes, q, n_quad)
        self.derivative_systems: dict[tuple[int, ...], "TripletSeries"] = {}
        self._dcache: dict = {}

    # -- series protocol ----------------------------------------------------

    @property
    def times(self) -> np.ndarray:
        return self.ctx.drivers.grid.times

    @property
    def n_steps(self) -> int:
        return self.ctx.drivers.grid.n_steps

    @property
    def n_paths(self) -> int:
        return self.ctx.drivers.n_paths

    def v_values(self, j: int) -> np.ndarray:
        if j == self.n_steps:
            return self.v_terminal
        return self.ctx.expand(j, self.v_coef[j])

    def vbar_values(self, j: int) -> np.ndarray:
        if j == self.n_steps:
            return np.zeros((self.n_paths, self.grid.n_nodes, self.dims.q, self.dims.d))
        return self.ctx.expand(j, self.vbar_coef[j])

    def vtilde_values(self, j: int) -> list[np.ndarray]:
        if j == self.n_steps:
            return [np.zeros((self.n_paths,) + c.shape[2:]) for c in self.vtilde_coef]
        return [self.ctx.expand(j, c[j]) for c in self.vtilde_coef]

    def v_derivative_values(self, j: int, alpha: tuple[int, ...]) -> np.ndarray:
        alpha = tuple(int(a) for a in alpha)
        if j == self.n_steps:
            return self.grid.derivative_nodes(self.v_terminal, alpha, n_lead=1)
        key = ("v", j, alpha)
        coef = self._dcache.get(key)
        if coef is None:
            coef = self.grid.derivative_nodes(self.v_coef[j], alpha, n_lead=1)
            self._dcache[key] = coef
        return self.ctx.expand(j, coef)

    def vbar_derivative_values(self, j: int, alpha: tuple[int, ...]) -> np.ndarray:
        alpha = tuple(int(a) for a in alpha)
        if j == self.n_steps:
            return np.zeros((self.n_paths, self.grid.n_nodes, self.dims.q, self.dims.d))
        key = ("vbar", j, alpha)
        coef = self._dcache.get(key)
        if coef is None:
            coef = self.grid.derivative_nodes(self.vbar_coef[j], alpha, n_lead=1)
            self._dcache[key] = coef
        return self.ctx.expand(j, coef)

    # -- realization views ---------------------------------------------------

    def view_at(self, j: int, restricted: bool = True) -> "SeriesView":
        dv = RestrictedDriverView(self.ctx.drivers, j) if restricted else None
        return SeriesView(self, j, dv)

    def mean_triplet_at(self, j: int) -> FieldTriplet:
        """Path-averaged fields at one time step."""
        v = GriddedField(self.grid, self.v_values(j).mean(axis=0), validate=False)
        vbar = GriddedField(self.grid, self.vbar_values(j).mean(axis=0), validate=False)
        vt = tuple(GriddedField(self.grid, a.mean(axis=0), validate=False)
                   for a in self.vtilde_values(j))
        return FieldTriplet(v, vbar, vt)

    def mean_surface(self) -> np.ndarray:
        """Path-averaged V over all steps: (n_steps+1, n_nodes, q)."""
        return np.stack([self.v_values(j).mean(axis=0) for j in range(self.n_steps + 1)])

    # -- constructors ---------------------------------------------------------

    @staticmethod
    def zero(ctx: RegressionContext, grid: SpatialGrid, dims: ModelDims, levy: LevySpec) -> "TripletSeries":
        n, nb = ctx.drivers.grid.n_steps, ctx.n_basis
        return TripletSeries(
            ctx, grid, dims, levy,
            v_coef=np.zeros((n, nb, grid.n_nodes, dims.q)),
            v_terminal=np.zeros((ctx.drivers.n_paths, grid.n_nodes, dims.q)),
            vbar_coef=np.zeros((n, nb, grid.n_nodes, dims.q, dims.d)),
            vtilde_coef=[np.zeros((n, nb, grid.n_nodes, dims.q, m)) for m in levy.quad_sizes()],
        )

    @staticmethod
    def terminal_propagated(ctx: RegressionContext, grid: SpatialGrid, dims: ModelDims,
                            levy: LevySpec, terminal: np.ndarray) -> "TripletSeries":
        """Initial iterate with V(t) frozen at (the projection of) H, Vbar = Vtilde = 0."""
        out = TripletSeries.zero(ctx, grid, dims, levy)
        out.v_terminal = terminal
        for j in range(out.n_steps):
            out.v_coef[j] = ctx.fit(j, terminal)
        return out

    def difference(self, other: "TripletSeries") -> "TripletSeries":
        """Coefficient-space difference; valid because both share the context."""
        if other.ctx is not self.ctx:
            raise ValueError("series differences require a shared regression context")
        return TripletSeries(
            self.ctx, self.grid, self.dims, self.levy,
            v_coef=self.v_coef - other.v_coef,
            v_terminal=self.v_terminal - other.v_terminal,
            vbar_coef=self.vbar_coef - other.vbar_coef,
            vtilde_coef=[a - b for a, b in zip(self.vtilde_coef, other.vtilde_coef)],
        )


class SeriesView(TripletView):
    """Operator-facing view of one time slice of a TripletSeries."""

    def __init__(self, series: TripletSeries, j: int, drivers_view):
        super().__init__(series.grid, series.times[j], series.dims,
                         levy=series.levy, drivers=drivers_view, j=j, n_lead=1)
        self.series = series

    def _v(self):
        return self.series.v_values(self.j)

    def _vbar(self):
        return self.series.vbar_values(self.j)

    def _vtilde(self, channel):
        return self.series.vtilde_values(self.j)[channel]

    def V_derivative(self, alpha):
        return self._memo(("dV", tuple(alpha)),
                          lambda: self.series.v_derivative_values(self.j, tuple(alpha)))

    def Vbar_derivative(self, alpha):
        return self._memo(("dVbar", tuple(alpha)),
                          lambda: self.series.vbar_derivative_values(self.j, tuple(alpha)))


# ---------------------------------------------------------------------------
# solver configuration and diagnostics
# ---------------------------------------------------------------------------

def gamma_rule(K_D: float, T: float) -> float:
    """Time-weight exponent large enough for the contraction bookkeeping.

    Chosen so that (3 K_D^2 / (2 gamma)) * (T+1) * K_D^2 < 1/4 with margin,
    floored at 1 and capped so the weights e^{2 gamma t} stay well inside
    float range (the cap only binds for large K_D, where the weighted norms
    are equivalent anyway and the cap still discounts early times strongly).
    """
    gamma = max(1.0, 7.5 * max(K_D, 0.0) ** 4 * (T + 1.0))
    cap = 40.0 / T
    if gamma > cap:
        warnings.warn(f"gamma rule value {gamma:.3g} capped at {cap:.3g} to keep weights finite",
                      RuntimeWarning)
        gamma = cap
    return gamma


@dataclass
class PicardConfig:
    """Knobs of the fixed-point loop.

    `x_filter_degree` confines the fitted spatial fields to polynomials of
    that total degree (least-squares projection per step).  Operators whose
    drift feeds back grid derivatives of the unknown amplify node-frequency
    noise like 1/h^2 per iteration; restricting the iterates to a smooth
    subspace is the discrete counterpart of the derivative-graded norms that
    make the continuous iteration contract.  None disables the projection
    (fine for derivative-free drifts).
    """

    gamma: float
    max_iters: int = 40
    tol: float = 1e-12
    rel_tol: float = 1e-7
    basis: RegressionBasis = dc_field(default_factory=RegressionBasis)
    c_max: int = 0
    norm_k_max: int = 2
    initial: str = "zero"  # or "terminal"
    x_filter_degree: int | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if self.tol < 0 or self.rel_tol < 0:
            raise ConfigurationError("tolerances must be nonnegative")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.initial not in ("zero", "terminal"):
            raise ConfigurationError(f"unknown initial iterate {self.initial!r}")
        if self.x_filter_degree is not None and self.x_filter_degree < 0:
            raise ConfigurationError("x_filter_degree must be >= 0")

    def gamma_hat(self, K_D: float) -> float:
        """Companion constant 3 K_D^2 / (2 gamma) of the contraction estimate."""
        return 3.0 * K_D ** 2 / (2.0 * self.gamma)

    def weights(self) -> NormWeights:
        return NormWeights(k_max=max(self.norm_k_max, 1), gamma=self.gamma)


@dataclass
class PicardDiagnostics:
    """Per-iteration contraction record.

    `deltas` are the gamma-weighted iteration-norm differences driving the
    contraction statement; `deltas_flat` are their unweighted (gamma = 0)
    counterparts, which the stopping test uses because they compare uniformly
    across the whole time interval.
    """

    deltas: list[float] = dc_field(default_factory=list)
    deltas_flat: list[float] = dc_field(default_factory=list)
    ratios: list[float | None] = dc_field(default_factory=list)
    wall_times: list[float] = dc_field(default_factory=list)
    cauchy_tail: float = math.inf
    converged: bool = False
    diverged: bool = False
    iterations: int = 0
    gamma: float = 0.0
    gamma_hat: float = 0.0
    effective_tol: float = 0.0

    def records(self, include_timing: bool = False) -> list[dict]:
        """Per-iteration records; timing is opt-in so emitted diagnostics stay
        byte-reproducible across runs."""
        out = []
        for i, (d, f, r, w) in enumerate(
                zip(self.deltas, self.deltas_flat, self.ratios, self.wall_times)):
            rec = {"iteration": i + 1, "delta": d, "delta_flat": f, "ratio": r}
            if include_timing:
                rec["wall_time_s"] = w
            out.append(rec)
        return out


# ---------------------------------------------------------------------------
# one martingale-representation step
# ---------------------------------------------------------------------------

def spatial_projector(grid: SpatialGrid, degree: int) -> np.ndarray | None:
    """Least-squares projector (n_nodes x n_nodes) onto total-degree polynomials.

    Chebyshev-basis Vandermonde over coordinates mapped to [-1, 1] per axis;
    returns None when the subspace already spans the grid.
    """
    from .fields import multi_indices

    nodes = grid.nodes
    p = grid.p
    mapped = np.empty_like(nodes)
    for a in range(p):
        lo, hi = nodes[:, a].min(), nodes[:, a].max()
        mapped[:, a] = 2 * (nodes[:, a] - lo) / (hi - lo) - 1 if hi > lo else 0.0
    cols = []
    for total in range(degree + 1):
        for alpha in multi_indices(p, total):
            col = np.ones(grid.n_nodes)
            for a, e in enumerate(alpha):
                if e:
                    col = col * np.polynomial.chebyshev.chebvander(mapped[:, a], e)[:, e]
            cols.append(col)
    Q = np.stack(cols, axis=1)
    if Q.shape[1] >= grid.n_nodes:
        return None
    proj = Q @ np.linalg.pinv(Q)
    return proj


def _apply_projector(proj: np.ndarray, coef: np.ndarray, node_axis: int = 1) -> np.ndarray:
    """Project a coefficient block along its node axis."""
    moved = np.moveaxis(coef, node_axis, -1)
    out = moved @ proj.T
    return np.moveaxis(out, -1, node_axis)


def _backward_sweep(drift_fn, diffusion_fn, terminal: np.ndarray, U: TripletSeries,
                    drivers: DriverPaths, ctx: RegressionContext, dims: ModelDims,
                    levy: LevySpec, iteration: int | None = None,
                    proj: np.ndarray | None = None) -> TripletSeries:
    grid = U.grid
    n = drivers.grid.n_steps
    dt = drivers.grid.dt
    nb = ctx.n_basis
    v_coef = np.zeros((n, nb, grid.n_nodes, dims.q))
    vbar_coef = np.zeros((n, nb, grid.n_nodes, dims.q, dims.d))
    vtilde_coef = [np.zeros((n, nb, grid.n_nodes, dims.q, m)) for m in levy.quad_sizes()]
    v_next = terminal
    for j in range(n - 1, -1, -1):
        view = U.view_at(j)
        l_j = np.asarray(drift_fn(view), dtype=float)
        if not np.isfinite(l_j).all():
            raise DivergedError(f"drift non-finite at step {j}", iteration=iteration, step=j)
        r_v = ctx.fit(j, v_next)
        v_coef[j] = r_v + dt * ctx.fit(j, l_j) if l_j.any() else r_v
        resid = v_next - ctx.expand(j, r_v)
        if dims.d > 0:
            j_j = np.asarray(diffusion_fn(view), dtype=float)
            if not np.isfinite(j_j).all():
                raise DivergedError(f"diffusion non-finite at step {j}", iteration=iteration, step=j)
            dw = drivers.dW[:, j, :]
            target = resid[..., None] * dw[:, None, None, :]
            vbar_coef[j] = ctx.fit(j, target) / dt
            if j_j.any():
                vbar_coef[j] += ctx.fit(j, j_j)
        for i, ch in enumerate(levy.channels):
            dn = drivers.compensated(i)[:, j, :]
            target = resid[..., None] * dn[:, None, None, :]
            denom = np.asarray(ch.masses) * ch.lam * dt
            denom = np.where(denom > 0, denom, 1.0)
            vtilde_coef[i][j] = ctx.fit(j, target) / denom
        if proj is not None:
            v_coef[j] = _apply_projector(proj, v_coef[j])
            vbar_coef[j] = _apply_projector(proj, vbar_coef[j])
            for i in range(len(vtilde_coef)):
                vtilde_coef[i][j] = _apply_projector(proj, vtilde_coef[i][j])
        v_next = ctx.expand(j, v_coef[j])
        if not np.isfinite(v_next).all():
            raise DivergedError(f"solution non-finite at step {j}", iteration=iteration, step=j)
    return TripletSeries(ctx, grid, dims, levy, v_coef, terminal, vbar_coef, vtilde_coef)


def martingale_step(op: OperatorPair, H: TerminalCondition, U: TripletSeries,
                    drivers: DriverPaths, cfg: PicardConfig,
                    ctx: RegressionContext | None = None,
                    iteration: int | None = None) -> TripletSeries:
    """One application of the solution map: U -> V via backward regression.

    The drift integral uses left endpoints and the current outer iterate U;
    V anchors to H exactly at the last step (no regression at T).
    """
    if ctx is None:
        ctx = RegressionContext(cfg.basis, drivers)
    dims, levy = U.dims, U.levy
    terminal = H.evaluate(U.grid, dims, drivers)
    proj = (spatial_projector(U.grid, cfg.x_filter_degree)
            if cfg.x_filter_degree is not None else None)
    return _backward_sweep(op.drift, op.diffusion, terminal, U, drivers, ctx, dims, levy,
                           iteration=iteration, proj=proj)


def propagate_derivative_system(op: OperatorPair, H: TerminalCondition, U: TripletSeries,
                                drivers: DriverPaths, cfg: PicardConfig, c: int,
                                ctx: RegressionContext | None = None) -> dict[tuple[int, ...], TripletSeries]:
    """Solve the differentiated systems up to total order c against the iterate U.

    For each multi-index the drift/diffusion fields and the terminal data are
    replaced by their grid derivatives; results land in U.derivative_systems.
    """
    from .fields import multi_indices

    if ctx is None:
        ctx = U.ctx
    dims, levy, grid = U.dims, U.levy, U.grid
    terminal = H.evaluate(grid, dims, drivers)
    proj = (spatial_projector(grid, cfg.x_filter_degree)
            if cfg.x_filter_degree is not None else None)
    out: dict[tuple[int, ...], TripletSeries] = {}
    for order in range(1, c + 1):
        for alpha in multi_indices(grid.p, order):
            def d_drift(view, alpha=alpha):
                return grid.derivative_nodes(op.drift(view), alpha, n_lead=view.n_lead)

            def d_diffusion(view, alpha=alpha):
                return grid.derivative_nodes(op.diffusion(view), alpha, n_lead=view.n_lead)

            d_terminal = grid.derivative_nodes(terminal, alpha, n_lead=1)
            out[alpha] = _backward_sweep(d_drift, d_diffusion, d_terminal, U, drivers,
                                         ctx, dims, levy, proj=proj)
    U.derivative_systems.update(out)
    return out


# ---------------------------------------------------------------------------
# the fixed-point loop
# ---------------------------------------------------------------------------

def picard_solve(op: OperatorPair, H: TerminalCondition, drivers: DriverPaths,
                 cfg: PicardConfig, grid: SpatialGrid, dims: ModelDims,
                 levy: LevySpec | None = None) -> tuple[TripletSeries, PicardDiagnostics]:
    """Iterate the solution map to its fixed point with contraction diagnostics.

    Starts from the zero triplet (or the terminal-propagated one), stops when
    the weighted-norm difference drops below the effective tolerance
    max(tol, rel_tol * delta_1), and aborts early after three consecutive
    growing differences.  Non-convergence is reported in the diagnostics,
    never silently.  After convergence the derivative systems up to cfg.c_max
    are propagated on the final iterate.
    """
    if levy is None:
        levy = drivers.levy if drivers.levy is not None else LevySpec.none()
    if op.adaptedness_tag == "path-functional":
        warnings.warn("path-functional operator: regression features only span the "
                      "current driver state (experimental)", RuntimeWarning)
    ctx = RegressionContext(cfg.basis, drivers)
    weights = cfg.weights()
    diag = PicardDiagnostics(gamma=cfg.gamma, gamma_hat=cfg.gamma_hat(op.K_D))
    proj = (spatial_projector(grid, cfg.x_filter_degree)
            if cfg.x_filter_degree is not None else None)

    terminal = H.evaluate(grid, dims, drivers)
    if cfg.initial == "terminal":
        U = TripletSeries.terminal_propagated(ctx, grid, dims, levy, terminal)
        if proj is not None:
            U.v_coef = _apply_projector(proj, U.v_coef, node_axis=2)
    else:
        U = TripletSeries.zero(ctx, grid, dims, levy)

    effective_tol = cfg.tol
    grow_streak = 0
    best, best_delta = U, math.inf
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        try:
            V = _backward_sweep(op.drift, op.diffusion, terminal, U, drivers, ctx,
                                dims, levy, iteration=it, proj=proj)
        except DivergedError:
            diag.diverged = True
            diag.iterations = it
            diag.effective_tol = effective_tol
            return best, diag
        comp = mgamma_components(V.difference(U), cfg.norm_k_max)
        delta = comp.combine_full(cfg.gamma)
        delta_flat = comp.combine_full(0.0)
        ratio = None
        if diag.deltas:
            prev = diag.deltas[-1]
            ratio = delta / prev if prev > 0 else None
        diag.deltas.append(delta)
        diag.deltas_flat.append(delta_flat)
        diag.ratios.append(ratio)
        diag.wall_times.append(time.perf_counter() - t0)
        if it == 1:
            effective_tol = max(cfg.tol, cfg.rel_tol * delta_flat)
        diag.effective_tol = effective_tol
        if delta_flat <= best_delta:
            best, best_delta = V, delta_flat
        if delta_flat <= effective_tol:
            best = V
            diag.converged = True
            diag.iterations = it
            break
        if ratio is not None and ratio > 1.0:
            grow_streak += 1
            if grow_streak >= 3:
                diag.diverged = True
                diag.iterations = it
                break
        else:
            grow_streak = 0
        U = V
        diag.iterations = it

    later = [r for r in diag.ratios[2:] if r is not None]
    if later:
        r = max(later)
        if r < 1.0 and diag.deltas:
            diag.cauchy_tail = diag.deltas[-1] * r / (1.0 - r)
        else:
            diag.cauchy_tail = math.inf
    elif diag.converged:
        diag.cauchy_tail = 0.0

    if diag.converged and cfg.c_max > 0:
        propagate_derivative_system(op, H, best, drivers, cfg, cfg.c_max, ctx=ctx)
    return best, diag


# ---------------------------------------------------------------------------
# forward reconstruction
# ---------------------------------------------------------------------------

def reconstruct_forward(series: TripletSeries, op: OperatorPair,
                        drivers: DriverPaths) -> tuple[np.ndarray, float]:
    """Integrate the solved triplet forward and compare against the terminal slice.

    Forward form: V(t) = V(0) - int L ds - int (J - Vbar) dW + int Vtilde dN~.
    Returns the per-path terminal residual (n_paths, n_nodes, q) and its RMS.
    """
    n = drivers.grid.n_steps
    dt = drivers.grid.dt
    v = series.v_values(0).copy()
    for j in range(n):
        view = series.view_at(j)
        l_j = np.asarray(op.drift(view), dtype=float)
        v -= dt * l_j
        if series.dims.d > 0:
            j_j = np.asarray(op.diffusion(view), dtype=float)
            integrand = j_j - series.vbar_values(j)
            v -= np.einsum("pnqd,pd->pnq", integrand, drivers.dW[:, j, :])
        vt = series.vtilde_values(j)
        for i in range(len(vt)):
            dn = drivers.compensated(i)[:, j, :]
            v += np.einsum("pnqc,pc->pnq", vt[i], dn)
    residual = v - series.v_values(n)
    rms = float(np.sqrt(np.mean(residual ** 2)))
    return residual, rms
