"""The drift/diffusion operator pair and its linear instance.

An operator pair holds two callables acting on a *triplet view*: an object
exposing the solution fields, their cached grid derivatives, the jump fields
at their quadrature nodes, and (for path-functional operators) the driver
history up to the current time.  The same callables serve single-realization
evaluation and the solver's batched per-path evaluation; field arrays carry
an optional leading path axis that broadcasts through.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import (
    ConfigurationError,
    FieldTriplet,
    GriddedField,
    ModelDims,
    SpatialGrid,
    ck_norm,
    multi_indices,
    nu_norm,
)


class OperatorError(RuntimeError):
    """Raised when an operator produces non-finite output."""


class PreconditionError(RuntimeError):
    """Raised when an operator is evaluated without its required inputs."""


# ---------------------------------------------------------------------------
# triplet views
# ---------------------------------------------------------------------------

class RestrictedDriverView:
    """Driver history up to a step index: no lookahead by construction."""

    def __init__(self, drivers, j: int):
        self._drivers = drivers
        self.j = int(j)
        self.t = drivers.grid.times[self.j]

    @property
    def W(self) -> np.ndarray:
        """Brownian levels (n_paths, j+1, d) up to the current step."""
        return self._drivers.W[:, : self.j + 1, :]

    @property
    def L(self) -> np.ndarray:
        """Subordinator levels (n_paths, j+1, h) up to the current step."""
        return self._drivers.L[:, : self.j + 1, :]

    @property
    def n_paths(self) -> int:
        return self._drivers.n_paths


class TripletView:
    """Read access to (V, Vbar, Vtilde) and their grid derivatives at one time.

    Arrays have shape (*lead, n_nodes, q), (*lead, n_nodes, q, d) and
    (*lead, n_nodes, q, n_quad_i); `lead` is empty for single realizations and
    (n_paths,) inside the solver.  Derivatives are cached per multi-index.
    """

    def __init__(self, grid: SpatialGrid, t: float, dims: ModelDims, levy=None,
                 drivers: RestrictedDriverView | None = None, j: int | None = None,
                 n_lead: int = 0):
        self.grid = grid
        self.t = float(t)
        self.dims = dims
        self.levy = levy
        self.drivers = drivers
        self.j = j
        self.n_lead = n_lead
        self._cache: dict = {}

    # subclasses provide the raw fields
    def _v(self) -> np.ndarray:
        raise NotImplementedError

    def _vbar(self) -> np.ndarray:
        raise NotImplementedError

    def _vtilde(self, channel: int) -> np.ndarray:
        raise NotImplementedError

    def V(self) -> np.ndarray:
        return self._memo(("V",), self._v)

    def Vbar(self) -> np.ndarray:
        return self._memo(("Vbar",), self._vbar)

    def Vtilde(self, channel: int) -> np.ndarray:
        return self._memo(("Vtilde", channel), lambda: self._vtilde(channel))

    def V_derivative(self, alpha: Sequence[int]) -> np.ndarray:
        key = ("dV", tuple(int(a) for a in alpha))
        return self._memo(key, lambda: self.grid.derivative_nodes(self.V(), alpha, n_lead=self.n_lead))

    def Vbar_derivative(self, alpha: Sequence[int]) -> np.ndarray:
        key = ("dVbar", tuple(int(a) for a in alpha))
        return self._memo(key, lambda: self.grid.derivative_nodes(self.Vbar(), alpha, n_lead=self.n_lead))

    def vtilde_nu_integral(self) -> np.ndarray:
        """Quadrature-integrated jump coupling: sum_i lam_i int Vtilde_i(z) nu_i(dz)."""
        def compute():
            out = None
            if self.levy is not None:
                for i, ch in enumerate(self.levy.channels):
                    m = np.asarray(ch.masses)
                    term = ch.lam * np.tensordot(self.Vtilde(i), m, axes=([-1], [0]))
                    out = term if out is None else out + term
            if out is None:
                out = np.zeros_like(self.V())
            return out
        return self._memo(("nu_int",), compute)

    def _memo(self, key, fn):
        hit = self._cache.get(key)
        if hit is None:
            hit = fn()
            self._cache[key] = hit
        return hit


class StaticTripletView(TripletView):
    """View over a single FieldTriplet realization (no path axis)."""

    def __init__(self, triplet: FieldTriplet, t: float, dims: ModelDims, levy=None):
        super().__init__(triplet.V.grid, t, dims, levy=levy, n_lead=0)
        self._triplet = triplet

    def _v(self):
        return self._triplet.V.values

    def _vbar(self):
        return self._triplet.Vbar.values

    def _vtilde(self, channel):
        return self._triplet.Vtilde[channel].values

    def V_derivative(self, alpha):
        # route through the field's own cache so it is shared across views
        return self._triplet.V.derivative(alpha).values

    def Vbar_derivative(self, alpha):
        return self._triplet.Vbar.derivative(alpha).values


class ArrayTripletView(TripletView):
    """View over raw arrays, usually with a leading path axis."""

    def __init__(self, grid, t, dims, v, vbar=None, vtilde=(), levy=None,
                 drivers=None, j=None, n_lead=1):
        super().__init__(grid, t, dims, levy=levy, drivers=drivers, j=j, n_lead=n_lead)
        self._v_arr = v
        self._vbar_arr = vbar
        self._vtilde_arrs = tuple(vtilde)

    def _v(self):
        return self._v_arr

    def _vbar(self):
        if self._vbar_arr is None:
            return np.zeros(self._v_arr.shape + (self.dims.d,))
        return self._vbar_arr

    def _vtilde(self, channel):
        return self._vtilde_arrs[channel]


# ---------------------------------------------------------------------------
# operator pair
# ---------------------------------------------------------------------------

@dataclass
class OperatorPair:
    """Drift operator and diffusion operator with their differential orders.

    `drift(view)` returns (*lead, n_nodes, q); `diffusion(view)` returns
    (*lead, n_nodes, q, d).  `k` and `m` are the highest derivative orders the
    callables read from V and Vbar; `K_D` is the declared Lipschitz constant
    on the domain.  Instances are immutable after construction and reentrant.
    """

    drift: Callable[[TripletView], np.ndarray]
    diffusion: Callable[[TripletView], np.ndarray]
    k: int
    m: int
    K_D: float
    adaptedness_tag: str = "deterministic"
    name: str = "operator"

    def __post_init__(self):
        if self.k < self.m:
            raise ConfigurationError(f"drift order k={self.k} must be >= diffusion order m={self.m}")
        if self.K_D < 0:
            raise ConfigurationError("K_D must be nonnegative")
        if self.adaptedness_tag not in ("deterministic", "path-functional"):
            raise ConfigurationError(f"unknown adaptedness tag {self.adaptedness_tag!r}")


def _check_finite(values: np.ndarray, grid: SpatialGrid, what: str) -> np.ndarray:
    if not np.isfinite(values).all():
        flat = np.isfinite(values).reshape(-1, *values.shape[-2:]) if values.ndim > 2 else values[None]
        bad = np.argwhere(~np.isfinite(values))
        node_axis = values.ndim - 2
        node = int(bad[0][node_axis])
        raise OperatorError(
            f"{what} produced a non-finite value at node {node} (x = {grid.nodes[node]})"
        )
    return values


def eval_drift(op: OperatorPair, t: float, triplet: FieldTriplet, dims: ModelDims,
               levy=None) -> GriddedField:
    """Evaluate the drift operator on one triplet realization.

    Populates the triplet's derivative caches up to the declared orders first;
    inputs are never mutated beyond that cache fill.
    """
    view = StaticTripletView(triplet, t, dims, levy=levy)
    _populate(view, op.k, op.m)
    out = np.asarray(op.drift(view), dtype=float)
    if out.shape != (triplet.V.grid.n_nodes, dims.q):
        raise OperatorError(f"drift returned shape {out.shape}, expected {(triplet.V.grid.n_nodes, dims.q)}")
    _check_finite(out, triplet.V.grid, "drift operator")
    return GriddedField(triplet.V.grid, out, validate=False)


def eval_diffusion(op: OperatorPair, t: float, triplet: FieldTriplet, dims: ModelDims,
                   levy=None) -> GriddedField:
    """Evaluate the diffusion operator on one triplet realization."""
    view = StaticTripletView(triplet, t, dims, levy=levy)
    _populate(view, op.k, op.m)
    out = np.asarray(op.diffusion(view), dtype=float)
    if out.shape != (triplet.V.grid.n_nodes, dims.q, dims.d):
        raise OperatorError(
            f"diffusion returned shape {out.shape}, expected {(triplet.V.grid.n_nodes, dims.q, dims.d)}"
        )
    _check_finite(out, triplet.V.grid, "diffusion operator")
    return GriddedField(triplet.V.grid, out, validate=False)


def _populate(view: TripletView, k: int, m: int) -> None:
    try:
        for c in range(1, k + 1):
            for alpha in multi_indices(view.grid.p, c):
                view.V_derivative(alpha)
        for c in range(1, m + 1):
            for alpha in multi_indices(view.grid.p, c):
                view.Vbar_derivative(alpha)
    except Exception as exc:  # surface as a precondition failure with context
        raise PreconditionError(f"cannot populate derivative caches to order ({k}, {m}): {exc}") from exc


# ---------------------------------------------------------------------------
# the linear instance
# ---------------------------------------------------------------------------

Coefficient = float | Callable[[np.ndarray], np.ndarray]


def _coeff_on_grid(coeff: Coefficient, grid: SpatialGrid) -> np.ndarray:
    if callable(coeff):
        vals = np.asarray(coeff(grid.nodes), dtype=float).reshape(grid.n_nodes)
    else:
        vals = np.full(grid.n_nodes, float(coeff))
    if not np.isfinite(vals).all():
        raise ConfigurationError("coefficient field has non-finite values on the grid")
    return vals


@dataclass
class LinearCoefficients:
    """Coefficients of the second-order linear drift/diffusion pair.

    `a[i][j]`, `b[j]`, `c` act on V and its derivatives; `abar`, `bbar`,
    `cbar` act on the columns of Vbar (summed over the Brownian columns so the
    result stays q-dimensional).  Entries are constants or callables of the
    node coordinates; missing entries mean zero.
    """

    p: int
    a: dict[tuple[int, int], Coefficient] = field(default_factory=dict)
    b: dict[int, Coefficient] = field(default_factory=dict)
    c: Coefficient = 0.0
    abar: dict[tuple[int, int], Coefficient] = field(default_factory=dict)
    bbar: dict[int, Coefficient] = field(default_factory=dict)
    cbar: Coefficient = 0.0

    def sup_bound(self, grid: SpatialGrid, d: int) -> float:
        """Triangle-inequality Lipschitz bound from coefficient sup-norms.

        Barred terms contract d Brownian columns, hence the factor d.
        """
        total = 0.0
        for coeff in list(self.a.values()) + list(self.b.values()) + [self.c]:
            total += float(np.abs(_coeff_on_grid(coeff, grid)).max())
        for coeff in list(self.abar.values()) + list(self.bbar.values()) + [self.cbar]:
            total += d * float(np.abs(_coeff_on_grid(coeff, grid)).max())
        return total


def _unit(p: int, axis: int, order: int = 1) -> tuple[int, ...]:
    alpha = [0] * p
    alpha[axis] += order
    return tuple(alpha)


def build_linear_operator(coeffs: LinearCoefficients, dims: ModelDims,
                          grid: SpatialGrid) -> OperatorPair:
    """Second-order linear operator pair from coefficient fields.

    The drift combines second, first and zeroth order terms in V plus the
    column-contracted terms in Vbar; the diffusion applies the V part of the
    same expression and replicates it across the d Brownian columns.
    """
    p = dims.p
    a_vals = {ij: _coeff_on_grid(cf, grid) for ij, cf in coeffs.a.items()}
    b_vals = {j: _coeff_on_grid(cf, grid) for j, cf in coeffs.b.items()}
    c_vals = _coeff_on_grid(coeffs.c, grid)
    abar_vals = {ij: _coeff_on_grid(cf, grid) for ij, cf in coeffs.abar.items()}
    bbar_vals = {j: _coeff_on_grid(cf, grid) for j, cf in coeffs.bbar.items()}
    cbar_vals = _coeff_on_grid(coeffs.cbar, grid)

    def second_index(i: int, j: int) -> tuple[int, ...]:
        alpha = [0] * p
        alpha[i] += 1
        alpha[j] += 1
        return tuple(alpha)

    def v_part(view: TripletView) -> np.ndarray:
        out = c_vals[:, None] * view.V()
        for (i, j), av in a_vals.items():
            out = out + av[:, None] * view.V_derivative(second_index(i, j))
        for j, bv in b_vals.items():
            out = out + bv[:, None] * view.V_derivative(_unit(p, j))
        return out

    def drift(view: TripletView) -> np.ndarray:
        out = v_part(view)
        if dims.d > 0:
            bar0 = view.Vbar().sum(axis=-1)
            out = out + cbar_vals[:, None] * bar0
            for (i, j), av in abar_vals.items():
                out = out + av[:, None] * view.Vbar_derivative(second_index(i, j)).sum(axis=-1)
            for j, bv in bbar_vals.items():
                out = out + bv[:, None] * view.Vbar_derivative(_unit(p, j)).sum(axis=-1)
        return out

    def diffusion(view: TripletView) -> np.ndarray:
        col = v_part(view)
        return np.repeat(col[..., None], dims.d, axis=-1)

    k_d = coeffs.sup_bound(grid, dims.d)
    return OperatorPair(drift=drift, diffusion=diffusion, k=2, m=2, K_D=k_d, name="linear")


def zero_operator(dims: ModelDims) -> OperatorPair:
    """Operator pair that is identically zero (k = m = 0)."""

    def drift(view):
        return np.zeros_like(view.V())

    def diffusion(view):
        return np.zeros(view.V().shape + (dims.d,))

    return OperatorPair(drift=drift, diffusion=diffusion, k=0, m=0, K_D=0.0, name="zero")


def scaled_operator(op: OperatorPair, factor: float) -> OperatorPair:
    """The pair (factor * L, factor * J) with the scaled Lipschitz constant."""
    return OperatorPair(
        drift=lambda view: factor * op.drift(view),
        diffusion=lambda view: factor * op.diffusion(view),
        k=op.k, m=op.m, K_D=abs(factor) * op.K_D,
        adaptedness_tag=op.adaptedness_tag, name=f"{factor}*{op.name}",
    )


# ---------------------------------------------------------------------------
# empirical Lipschitz validation
# ---------------------------------------------------------------------------

def estimate_lipschitz(op: OperatorPair, sampler: Callable[[int], tuple[FieldTriplet, FieldTriplet]],
                       trials: int, c_max: int, dims: ModelDims, t: float = 0.0,
                       levy=None) -> float:
    """Empirical Lipschitz ratio of the drift over sampled triplet pairs.

    For each sampled pair (u, v) and each derivative grade c <= c_max the
    ratio compares the largest component of the grade-c derivative of
    L(u) - L(v) against ||u-v||_{C^{k+c}} + ||ubar-vbar||_{C^{m+c}} +
    ||utilde-vtilde||_{nu,c}.  Pairs with zero denominator are skipped with a
    warning.  The max ratio is returned for comparison with the declared K_D.
    """
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    best = 0.0
    for trial in range(trials):
        u, v = sampler(trial)
        grid = u.V.grid
        lu = eval_drift(op, t, u, dims, levy=levy)
        lv = eval_drift(op, t, v, dims, levy=levy)
        diff = GriddedField(grid, lu.values - lv.values, validate=False)
        du = GriddedField(grid, u.V.values - v.V.values, validate=False)
        dbar = GriddedField(grid, u.Vbar.values - v.Vbar.values, validate=False)
        dtil = tuple(
            GriddedField(grid, fu.values - fv.values, validate=False)
            for fu, fv in zip(u.Vtilde, v.Vtilde)
        )
        for c in range(c_max + 1):
            if c == 0:
                num = float(np.abs(diff.values).max())
            else:
                num = max(
                    float(np.abs(diff.derivative(alpha).values).max())
                    for alpha in multi_indices(grid.p, c)
                )
            den = ck_norm(du, op.k + c) + ck_norm(dbar, op.m + c)
            if dtil and levy is not None:
                den += nu_norm(dtil, levy, c)
            if den == 0.0:
                warnings.warn(f"trial {trial}: identical triplet pair, skipped", RuntimeWarning)
                continue
            best = max(best, num / den)
    return best
