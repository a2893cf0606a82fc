"""Sampling of the driving noise: Brownian motion, subordinators, compensation.

Jump measures are realized as finite atom lists: discrete measures directly,
densities through Gauss-Legendre quadrature on a truncated size window.  The
simulated subordinators are compound Poisson processes of that discretized
measure, so compensation, jump-norm quadrature and regression cells all refer
to exactly the same atoms.

Reproducibility: every path owns a counter-based stream derived from the
master seed (Philox key = (seed, family), jumped by path index), so path i is
a function of (seed, i) alone, regardless of path count, evaluation order or
worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import ConfigurationError, ModelDims

# stream families carved out of the master seed
FAMILY_BROWNIAN = 0
FAMILY_JUMPS = 1
FAMILY_ENVIRONMENT = 2
FAMILY_WEALTH = 3
FAMILY_SAMPLER = 4


def path_rng(seed: int, family: int, path_index: int, sub: int = 0) -> np.random.Generator:
    """Counter-based per-path generator.

    Philox keyed by (seed, family:sub) and jumped by the path index, so the
    stream is a function of (seed, family, sub, path) alone: independent of
    path count, channel count and evaluation order.
    """
    key = [int(seed), (int(family) << 32) + int(sub)]
    return np.random.Generator(np.random.Philox(key=key).jumped(path_index))


# ---------------------------------------------------------------------------
# time grid and jump measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j*T/n_steps on [0, T]."""

    T: float
    n_steps: int

    def __post_init__(self):
        if self.T <= 0:
            raise ConfigurationError(f"horizon T must be positive, got {self.T}")
        if self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass(frozen=True)
class LevyChannel:
    """One jump channel: atomized size measure plus intensity scaling.

    `nodes` are the admissible jump sizes (all positive), `masses` the measure
    of each atom, `lam` the time scaling of the channel's Poisson clock.  For
    density-based measures `truncated_mass` records the small-jump mass
    discarded below the truncation point.
    """

    nodes: tuple[float, ...]
    masses: tuple[float, ...]
    lam: float
    kind: str = "atoms"
    truncated_mass: float = 0.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigurationError(f"channel intensity lambda must be positive, got {self.lam}")
        if len(self.nodes) != len(self.masses) or len(self.nodes) == 0:
            raise ConfigurationError("channel needs matching, nonempty nodes and masses")
        if any(z <= 0 for z in self.nodes):
            raise ConfigurationError("jump sizes must be positive")
        if any(m < 0 for m in self.masses):
            raise ConfigurationError("atom masses must be nonnegative")
        if not math.isfinite(self.total_mass):
            raise ConfigurationError("total measure mass must be finite")

    @property
    def total_mass(self) -> float:
        return float(sum(self.masses))

    @property
    def mean_jump_rate(self) -> float:
        """lambda * int z nu(dz) — the expected subordinator slope."""
        return self.lam * float(sum(z * m for z, m in zip(self.nodes, self.masses)))

    @staticmethod
    def from_atoms(atoms: Sequence[tuple[float, float]], lam: float) -> "LevyChannel":
        nodes = tuple(float(z) for z, _ in atoms)
        masses = tuple(float(m) for _, m in atoms)
        return LevyChannel(nodes=nodes, masses=masses, lam=lam, kind="atoms")

    @staticmethod
    def from_density(rate: Callable[[np.ndarray], np.ndarray], z_cap: float, lam: float,
                     eps: float | None = None, n_quad: int = 16) -> "LevyChannel":
        """Gauss-Legendre atomization of a Levy density on [eps, z_cap].

        The compound-Poisson approximation discards jumps below eps
        (default 1e-3 * z_cap); the discarded mass is estimated and recorded.
        """
        if eps is None:
            eps = 1e-3 * z_cap
        if not 0 < eps < z_cap:
            raise ConfigurationError(f"need 0 < eps < z_cap, got eps={eps}, z_cap={z_cap}")
        x, w = np.polynomial.legendre.leggauss(n_quad)
        nodes = 0.5 * (z_cap - eps) * x + 0.5 * (z_cap + eps)
        weights = 0.5 * (z_cap - eps) * w
        masses = weights * np.asarray(rate(nodes), dtype=float)
        if (masses < 0).any():
            raise ConfigurationError("Levy density must be nonnegative on the quadrature window")
        # estimate of the discarded small-jump mass, for reporting only
        xs, ws = np.polynomial.legendre.leggauss(n_quad)
        lo = eps * 1e-3
        small_nodes = 0.5 * (eps - lo) * xs + 0.5 * (eps + lo)
        small = float(np.sum(0.5 * (eps - lo) * ws * np.asarray(rate(small_nodes), dtype=float)))
        return LevyChannel(nodes=tuple(nodes), masses=tuple(masses), lam=lam,
                           kind="density", truncated_mass=small)


@dataclass(frozen=True)
class LevySpec:
    """All jump channels of the model."""

    channels: tuple[LevyChannel, ...] = ()

    @property
    def h(self) -> int:
        return len(self.channels)

    def quad_sizes(self) -> tuple[int, ...]:
        return tuple(len(ch.nodes) for ch in self.channels)

    @staticmethod
    def none() -> "LevySpec":
        return LevySpec(channels=())


# ---------------------------------------------------------------------------
# sampled paths
# ---------------------------------------------------------------------------

@dataclass
class JumpChannelPaths:
    """Sampled events of one channel: per-step atom counts plus the raw events."""

    counts: np.ndarray          # (n_paths, n_steps, n_cells) int32
    event_path: np.ndarray      # (n_events,)
    event_time: np.ndarray      # (n_events,)
    event_cell: np.ndarray      # (n_events,)
    compensated: np.ndarray | None = None  # (n_paths, n_steps, n_cells) float


class DriverPaths:
    """Sampled randomness on a shared time grid.

    Immutable after construction; every downstream consumer only reads.  The
    Brownian and jump parts can be built separately and combined.
    """

    def __init__(self, dims: ModelDims, grid: TimeGrid, seed: int, n_paths: int,
                 dW: np.ndarray | None = None,
                 jump_channels: list[JumpChannelPaths] | None = None,
                 levy: LevySpec | None = None):
        self.dims = dims
        self.grid = grid
        self.master_seed = int(seed)
        self.n_paths = int(n_paths)
        self.dW = dW
        self.jump_channels = jump_channels
        self.levy = levy
        self._W = None
        self._L = None

    # -- Brownian accessors -------------------------------------------------

    @property
    def W(self) -> np.ndarray:
        """Brownian levels (n_paths, n_steps+1, d) with W(0) = 0."""
        if self._W is None:
            if self.dW is None:
                raise ValueError("Brownian part not simulated")
            lvl = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dims.d))
            np.cumsum(self.dW, axis=1, out=lvl[:, 1:, :])
            self._W = lvl
        return self._W

    # -- jump accessors -----------------------------------------------------

    @property
    def L(self) -> np.ndarray:
        """Subordinator levels (n_paths, n_steps+1, h), nondecreasing in time."""
        if self._L is None:
            if self.jump_channels is None or self.levy is None:
                raise ValueError("jump part not simulated")
            h = len(self.jump_channels)
            lvl = np.zeros((self.n_paths, self.grid.n_steps + 1, h))
            for i, (chp, ch) in enumerate(zip(self.jump_channels, self.levy.channels)):
                z = np.asarray(ch.nodes)
                incr = chp.counts.astype(float) @ z
                np.cumsum(incr, axis=1, out=lvl[:, 1:, i])
            self._L = lvl
        return self._L

    def compensated(self, channel: int) -> np.ndarray:
        chp = self.jump_channels[channel]
        if chp.compensated is None:
            raise ValueError("call compensate() before reading compensated increments")
        return chp.compensated

    # -- features for conditional expectations -------------------------------

    def state_at(self, j: int) -> np.ndarray:
        """Driver state (W(t_j), L(t_j)) as (n_paths, d + h)."""
        parts = []
        if self.dims.d > 0:
            parts.append(self.W[:, j, :])
        if self.levy is not None and self.levy.h > 0:
            parts.append(self.L[:, j, :])
        if not parts:
            return np.zeros((self.n_paths, 0))
        return np.concatenate(parts, axis=1)

    @property
    def state_dim(self) -> int:
        return self.dims.d + (self.levy.h if self.levy is not None else 0)

    def combine(self, other: "DriverPaths") -> "DriverPaths":
        """Merge a Brownian-only and a jump-only sample on the same grid/seed."""
        if (self.grid, self.master_seed, self.n_paths) != (other.grid, other.master_seed, other.n_paths):
            raise ValueError("can only combine parts sharing grid, seed and path count")
        dW = self.dW if self.dW is not None else other.dW
        jc = self.jump_channels if self.jump_channels is not None else other.jump_channels
        levy = self.levy if self.levy is not None else other.levy
        return DriverPaths(self.dims, self.grid, self.master_seed, self.n_paths,
                           dW=dW, jump_channels=jc, levy=levy)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate_brownian(dims: ModelDims, grid: TimeGrid, seed: int, n_paths: int) -> DriverPaths:
    """Independent Gaussian increments per path, step and component; W(0) = 0."""
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    dW = np.empty((n_paths, grid.n_steps, dims.d))
    s = math.sqrt(grid.dt)
    for i in range(n_paths):
        g = path_rng(seed, FAMILY_BROWNIAN, i)
        dW[i] = g.normal(0.0, s, size=(grid.n_steps, dims.d))
    return DriverPaths(dims, grid, seed, n_paths, dW=dW)


def simulate_subordinator(levy: LevySpec, grid: TimeGrid, seed: int, n_paths: int,
                          dims: ModelDims | None = None) -> DriverPaths:
    """Compound-Poisson subordinators of the atomized jump measures.

    Per channel the event clock runs at rate lam * nu(total) and sizes are
    drawn from the normalized atom masses, so paths are nondecreasing step
    functions and E[L_i(t)] = lam_i * t * int z nu_i(dz).
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    if dims is None:
        dims = ModelDims(p=1, q=1, d=0, h=levy.h)
    channels = []
    n_steps = grid.n_steps
    for ci, ch in enumerate(levy.channels):
        n_cells = len(ch.nodes)
        total = ch.total_mass
        rate = ch.lam * total
        probs = np.asarray(ch.masses) / total if total > 0 else None
        counts = np.zeros((n_paths, n_steps, n_cells), dtype=np.int32)
        ev_path, ev_time, ev_cell = [], [], []
        for i in range(n_paths):
            g = path_rng(seed, FAMILY_JUMPS, i, sub=ci)
            k = int(g.poisson(rate * grid.T)) if rate > 0 else 0
            if k == 0:
                continue
            times = np.sort(g.uniform(0.0, grid.T, size=k))
            cells = g.choice(n_cells, size=k, p=probs)
            steps = np.minimum((times / grid.dt).astype(int), n_steps - 1)
            np.add.at(counts[i], (steps, cells), 1)
            ev_path.append(np.full(k, i))
            ev_time.append(times)
            ev_cell.append(cells)
        channels.append(JumpChannelPaths(
            counts=counts,
            event_path=np.concatenate(ev_path) if ev_path else np.empty(0, dtype=int),
            event_time=np.concatenate(ev_time) if ev_time else np.empty(0),
            event_cell=np.concatenate(ev_cell) if ev_cell else np.empty(0, dtype=int),
        ))
    return DriverPaths(dims, grid, seed, n_paths, jump_channels=channels, levy=levy)


def compensate(jumps: DriverPaths, levy: LevySpec | None = None) -> DriverPaths:
    """Fill in compensated increments: count - lam * nu(cell) * dt per step and cell.

    Returns the same DriverPaths with both raw and compensated tallies stored.
    """
    levy = levy if levy is not None else jumps.levy
    if jumps.jump_channels is None:
        raise ValueError("jump part not simulated")
    dt = jumps.grid.dt
    for chp, ch in zip(jumps.jump_channels, levy.channels):
        comp_rate = np.asarray(ch.masses) * ch.lam * dt  # per cell
        chp.compensated = chp.counts.astype(float) - comp_rate[None, None, :]
    return jumps


def simulate_drivers(dims: ModelDims, grid: TimeGrid, levy: LevySpec, seed: int,
                     n_paths: int) -> DriverPaths:
    """Brownian plus compensated jump parts on one grid, one master seed."""
    out = None
    if dims.d > 0:
        out = simulate_brownian(dims, grid, seed, n_paths)
    if levy.h > 0:
        jp = compensate(simulate_subordinator(levy, grid, seed, n_paths, dims=dims))
        out = jp if out is None else out.combine(jp)
    if out is None:
        out = DriverPaths(dims, grid, seed, n_paths,
                          dW=np.zeros((n_paths, grid.n_steps, 0)),
                          jump_channels=[], levy=levy)
    if out.levy is None:
        out.levy = levy
    if out.jump_channels is None:
        out.jump_channels = []
    return out


# ---------------------------------------------------------------------------
# CSV audit export
# ---------------------------------------------------------------------------

def paths_to_csv_rows(paths: DriverPaths) -> tuple[list[str], list[list]]:
    """Long-format audit rows: one row per (path, step, channel) increment."""
    header = ["path", "step", "channel", "value"]
    rows: list[list] = []
    if paths.dW is not None:
        for i in range(paths.n_paths):
            for j in range(paths.grid.n_steps):
                for c in range(paths.dims.d):
                    rows.append([i, j, f"dW{c + 1}", paths.dW[i, j, c]])
    if paths.jump_channels:
        dL = np.diff(paths.L, axis=1)
        for i in range(paths.n_paths):
            for j in range(paths.grid.n_steps):
                for c in range(len(paths.jump_channels)):
                    rows.append([i, j, f"dL{c + 1}", dL[i, j, c]])
    return header, rows
