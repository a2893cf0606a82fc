"""Annulus truncation of unbounded domains and evaluation along random paths.

The unbounded region {|x| >= b} is exhausted by shells D_n = {b <= |x| <= n};
solutions on successive shells are compared through the shell-weighted norm.
A separate continuous Markov environment X carries the solution along a path:
fields are interpolated multilinearly at (t_j, X(t_j)) up to the first time
the environment drops below the stopping radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .drivers import FAMILY_ENVIRONMENT, TimeGrid, path_rng
from .fields import (
    ConfigurationError,
    GriddedField,
    NormWeights,
    SpatialGrid,
    DomainSpec,
    multi_indices,
)


class ExtrapolationError(RuntimeError):
    """Raised when a path leaves the hull of the solved grid."""


# ---------------------------------------------------------------------------
# annulus families
# ---------------------------------------------------------------------------

def annulus_family(b: int, n_max: int, p: int, resolution: int) -> list[SpatialGrid]:
    """Grids for the shells D_{b+1}, ..., D_{n_max}, nested by construction.

    All shells are masked restrictions of one union lattice over
    [-n_max, n_max]^p at `resolution` points per unit length, so the nodes of
    D_n are a subset of the nodes of D_{n+1}.
    """
    if n_max <= b:
        raise ConfigurationError(f"n_max must exceed b, got b={b}, n_max={n_max}")
    n_ax = int(round(2 * n_max * resolution)) + 1
    axes = [np.linspace(-float(n_max), float(n_max), n_ax) for _ in range(p)]
    mesh = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(sum(m ** 2 for m in mesh))
    tol = 1e-9 * max(1.0, float(n_max))
    grids = []
    for n in range(b + 1, n_max + 1):
        mask = (r >= b - tol) & (r <= n + tol)
        dom = DomainSpec(kind="annulus", p=p, b=float(b), n=float(n), resolution=resolution)
        grids.append(SpatialGrid(dom, axes, mask))
    return grids


def restrict_field(f: GriddedField, subgrid: SpatialGrid) -> GriddedField:
    """Restrict a field to a nested subgrid sharing the same lattice axes."""
    pos = np.searchsorted(f.grid._flat_index, subgrid._flat_index)
    if pos.max(initial=-1) >= len(f.grid._flat_index) or not np.array_equal(
            f.grid._flat_index[pos], subgrid._flat_index):
        raise ConfigurationError("subgrid nodes are not a subset of the field's grid")
    return GriddedField(subgrid, f.values[pos], validate=False)


# ---------------------------------------------------------------------------
# random environment
# ---------------------------------------------------------------------------

@dataclass
class EnvironmentSpec:
    """Coefficients of the environment SDE dX = mu(X) dt + sigma(X) dW.

    `mu` maps (n, p) states to (n, p) drifts; `sigma` maps them to
    (n, p, p_w) diffusion matrices (constants broadcast).  The stopping radius
    b triggers as soon as |X| drops below it.
    """

    mu: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    b: float
    p_w: int = 1

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.b < 0:
            raise ConfigurationError("stopping radius b must be >= 0")

    @property
    def p(self) -> int:
        return len(self.x0)

    @staticmethod
    def frozen(x0, b: float = 0.0) -> "EnvironmentSpec":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        p = len(x0)
        return EnvironmentSpec(
            mu=lambda x: np.zeros_like(x),
            sigma=lambda x: np.zeros((x.shape[0], p, 1)),
            x0=x0, b=b, p_w=1,
        )

    @staticmethod
    def ornstein_uhlenbeck(x0, rate: float = 1.0, vol: float = 1.0, b: float = 0.0) -> "EnvironmentSpec":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        p = len(x0)
        return EnvironmentSpec(
            mu=lambda x: -rate * x,
            sigma=lambda x: np.broadcast_to(vol * np.eye(p)[None], (x.shape[0], p, p)).copy(),
            x0=x0, b=b, p_w=p,
        )

    @staticmethod
    def geometric(x0, drift: float = 0.0, vol: float = 0.2, b: float = 0.0) -> "EnvironmentSpec":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        p = len(x0)
        return EnvironmentSpec(
            mu=lambda x: drift * x,
            sigma=lambda x: vol * x[:, :, None] * np.eye(p)[None],
            x0=x0, b=b, p_w=p,
        )


@dataclass
class EnvironmentPaths:
    """Simulated environment: states, stopping times and their step indices."""

    grid: TimeGrid
    X: np.ndarray          # (n_paths, n_steps+1, p)
    tau: np.ndarray        # (n_paths,)
    tau_index: np.ndarray  # (n_paths,) first step with |X| < b, else n_steps

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]


def simulate_environment(env: EnvironmentSpec, grid: TimeGrid, seed: int,
                         n_paths: int) -> EnvironmentPaths:
    """Euler-Maruyama sample of the environment with per-path streams.

    The stopping time is detected on the grid: tau = first t_j with
    |X(t_j)| < b, and T when the path never enters (inf of the empty set).
    """
    p = env.p
    n = grid.n_steps
    X = np.empty((n_paths, n + 1, p))
    X[:, 0, :] = env.x0
    dt = grid.dt
    sq = math.sqrt(dt)
    dW = np.empty((n_paths, n, env.p_w))
    for i in range(n_paths):
        g = path_rng(seed, FAMILY_ENVIRONMENT, i)
        dW[i] = g.normal(0.0, sq, size=(n, env.p_w))
    for j in range(n):
        x = X[:, j, :]
        drift = np.asarray(env.mu(x), dtype=float).reshape(n_paths, p)
        diff = np.asarray(env.sigma(x), dtype=float).reshape(n_paths, p, env.p_w)
        X[:, j + 1, :] = x + drift * dt + np.einsum("npw,nw->np", diff, dW[:, j, :])
    radius = np.linalg.norm(X, axis=2)
    below = radius < env.b
    tau_index = np.where(below.any(axis=1), below.argmax(axis=1), n)
    tau = grid.times[tau_index]
    return EnvironmentPaths(grid=grid, X=X, tau=tau, tau_index=tau_index)


# ---------------------------------------------------------------------------
# evaluation along paths
# ---------------------------------------------------------------------------

@dataclass
class PathValues:
    """Field values read along environment paths, truncated at the stopping time.

    `values` is (n_paths, n_steps+1, q) with NaN beyond tau; `sup_by_order`
    maps a derivative order to the per-time max absolute component
    (n_paths, n_steps+1), used by the path norm.
    """

    grid: TimeGrid
    values: np.ndarray
    tau: np.ndarray
    tau_index: np.ndarray
    sup_by_order: dict[int, np.ndarray] = field(default_factory=dict)
    terminal_values: np.ndarray | None = None
    terminal_reference: np.ndarray | None = None

    def terminal_mismatch(self) -> float:
        if self.terminal_values is None or self.terminal_reference is None:
            return math.nan
        return float(np.abs(self.terminal_values - self.terminal_reference).max())


def _interpolate_field(grid: SpatialGrid, values: np.ndarray, points: np.ndarray,
                       step: int) -> np.ndarray:
    """Multilinear interpolation of node values (n_nodes, q) at points (m, p)."""
    lat = grid.scatter(values)
    interp = RegularGridInterpolator(grid.axes, lat, method="linear",
                                     bounds_error=False, fill_value=np.nan)
    out = interp(points)
    if not np.isfinite(out).all():
        bad = np.argwhere(~np.isfinite(out))[0][0]
        raise ExtrapolationError(
            f"environment path leaves the solved grid hull at step {step} (x = {points[bad]})"
        )
    return out


def evaluate_along_path(series, env_paths: EnvironmentPaths, derivative_orders: int = 0,
                        terminal_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                        reducer: str = "mean") -> PathValues:
    """Read the solution along environment paths by multilinear interpolation.

    `series` is a solved triplet series (or any object exposing v_values /
    v_derivative_values and grid/times); `reducer` picks the path-averaged
    field ("mean") or pairs equation path i with environment path i
    ("paired", requires matching path counts).  The value series runs up to
    and including each path's stopping step and is NaN afterwards.  When
    `terminal_fn` is given, the interpolated value at (tau, X(tau)) is kept
    next to the reference H(X(tau)).
    """
    grid: SpatialGrid = series.grid
    tgrid = env_paths.grid
    n_env = env_paths.n_paths
    times = np.asarray(series.times)
    if len(times) != tgrid.n_steps + 1 or abs(times[-1] - tgrid.T) > 1e-12:
        raise ConfigurationError("series and environment must share the time grid")
    if reducer == "paired" and series.n_paths != n_env:
        raise ConfigurationError("paired evaluation needs matching path counts")

    def eval_field(per_path_field: np.ndarray, pts: np.ndarray, rows: np.ndarray, j: int) -> np.ndarray:
        if reducer == "mean":
            return _interpolate_field(grid, per_path_field.mean(axis=0), pts, j)
        out = np.empty((len(rows), per_path_field.shape[-1]))
        for r, pi in enumerate(rows):
            out[r] = _interpolate_field(grid, per_path_field[pi], pts[r:r + 1], j)[0]
        return out

    q = series.v_values(0).shape[-1]
    out = np.full((n_env, tgrid.n_steps + 1, q), np.nan)
    sups: dict[int, np.ndarray] = {
        c: np.full((n_env, tgrid.n_steps + 1), np.nan) for c in range(derivative_orders + 1)
    }
    term_vals = np.full((n_env, q), np.nan)
    for j in range(tgrid.n_steps + 1):
        rows = np.flatnonzero(env_paths.tau_index >= j)
        if rows.size == 0:
            continue
        pts = env_paths.X[rows, j, :]
        vals = eval_field(series.v_values(j), pts, rows, j)
        out[rows, j] = vals
        stopped_here = env_paths.tau_index[rows] == j
        if stopped_here.any():
            term_vals[rows[stopped_here]] = vals[stopped_here]
        sups[0][rows, j] = np.abs(vals).max(axis=-1)
        for c in range(1, derivative_orders + 1):
            g = None
            for alpha in multi_indices(grid.p, c):
                dv = eval_field(series.v_derivative_values(j, alpha), pts, rows, j)
                cur = np.abs(dv).max(axis=-1)
                g = cur if g is None else np.maximum(g, cur)
            sups[c][rows, j] = g

    term_ref = None
    if terminal_fn is not None:
        x_tau = env_paths.X[np.arange(n_env), env_paths.tau_index, :]
        term_ref = np.asarray(terminal_fn(x_tau), dtype=float)
        if term_ref.ndim == 1:
            term_ref = term_ref[:, None]
    return PathValues(grid=tgrid, values=out, tau=env_paths.tau,
                      tau_index=env_paths.tau_index, sup_by_order=sups,
                      terminal_values=term_vals, terminal_reference=term_ref)


def path_norm(values: PathValues, w: NormWeights) -> float:
    """Graded sup-norm along paths with the time-integral aggregation.

    Per time the grade is s(t) = sum_{i=1..k_max} xi(i) * max_{c <= min(i, J)}
    g_c(t) with g_c the order-c derivative sup along the path and J the
    highest order available; the reported scalar aggregates as
    sqrt(mean over paths of int_0^tau s(t)^2 dt) with a left Riemann sum.
    """
    orders = sorted(values.sup_by_order)
    if not orders:
        return 0.0
    n_paths, n_t = values.sup_by_order[0].shape
    # running max over derivative orders: cum[c] = max_{c' <= c} g_{c'}
    cum = []
    running = None
    for c in orders:
        g = values.sup_by_order[c]
        running = g if running is None else np.maximum(running, g)
        cum.append(running)
    s = np.zeros((n_paths, n_t))
    for i in range(1, w.k_max + 1):
        s += w.xi(i) * cum[min(i, len(cum) - 1)]
    dt = values.grid.dt
    idx = np.arange(n_t - 1)[None, :]
    live = idx < values.tau_index[:, None]  # left sum over [t_j, t_{j+1}] inside [0, tau]
    integrals = np.where(live, np.nan_to_num(s[:, :-1]) ** 2, 0.0).sum(axis=1) * dt
    return float(math.sqrt(np.mean(integrals)))
