"""Linearized two-class ARZ dynamics with Markov-jumping AV spacing.

The stored state is the physical deviation ``z = (rho1~, v1~, rho2~, v2~)``
from the nominal equilibrium on a cell-centred grid.  Each step converts to
the active mode's Riemann variables, applies first-order upwind transport
plus the explicit in-domain coupling, imposes the boundary conditions and
converts back.  A mode switch only swaps the matrices, so ``z`` is continuous
across jumps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backstepping import (Controller, KernelGrid, build_controller, cell_centers,
                           control_input, solve_kernels)
from .markov import ChainSpec, ModePath, chain_from_config, mode_at, sample_path
from .model import ModeLinearization, ModelError, linearize
from .params import Config, ConfigError, SpacingModeSet, TrafficParams

log = logging.getLogger(__name__)


class CFLError(RuntimeError):
    pass


@dataclass(frozen=True)
class InitialCondition:
    amplitudes: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    wavenumbers: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        if len(self.amplitudes) != 4 or len(self.wavenumbers) != 4:
            raise ConfigError("[ic] needs four amplitudes and four wavenumbers")
        if any(abs(a) >= 0.5 for a in self.amplitudes):
            raise ConfigError("[ic] amplitudes must stay below 0.5 for the linearization to apply")


@dataclass(frozen=True, eq=False)
class Scenario:
    params: TrafficParams
    modes: SpacingModeSet
    chain: ChainSpec
    n_cells: int = 100
    cfl: float = 0.9
    horizon: float = 400.0
    loop: str = "closed"
    ic: InitialCondition = field(default_factory=InitialCondition)
    seed: int = 0
    snapshot_every: float = 10.0
    kernel_n: int = 64
    kernel_tol: float = 1e-8
    kernel_max_iter: int = 200
    path: ModePath | None = None

    def __post_init__(self):
        if not 0 < self.cfl < 1:
            raise ConfigError("[sim] cfl must lie in (0, 1)")
        if self.horizon < 0:
            raise ConfigError("[sim] horizon must be non-negative")
        if self.n_cells < 32:
            raise ConfigError("[sim] n_cells must be >= 32")
        if self.loop not in ("open", "closed"):
            raise ConfigError("[sim] loop must be 'open' or 'closed'")
        if self.snapshot_every <= 0:
            raise ConfigError("[sim] snapshot_every must be positive")

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    @property
    def nominal_index(self) -> int | None:
        try:
            return self.modes.states.index(self.modes.nominal)
        except ValueError:
            return None


def scenario_from_config(cfg: Config, **overrides) -> Scenario:
    sim = cfg.section("sim")
    ic = cfg.section("ic")
    ker = cfg.section("kernels")
    try:
        kw = dict(
            n_cells=int(sim.get("n_cells", 100)),
            cfl=float(sim.get("cfl", 0.9)),
            horizon=float(sim.get("horizon", 400.0)),
            loop=str(sim.get("loop", "closed")),
            seed=int(sim.get("seed", 0)),
            snapshot_every=float(sim.get("snapshot_every", 10.0)),
            ic=InitialCondition(tuple(float(a) for a in ic.get("amplitudes", (0.1,) * 4)),
                                tuple(int(m) for m in ic.get("wavenumbers", (1,) * 4))),
            kernel_n=int(ker.get("n", 64)),
            kernel_tol=float(ker.get("tol", 1e-8)),
            kernel_max_iter=int(ker.get("max_iter", 200)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[sim]/[ic]/[kernels]: {exc}") from None
    kw.update(overrides)
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    return Scenario(cfg.traffic, cfg.modes, chain, **kw)


@dataclass(frozen=True)
class StateProfile:
    x: np.ndarray
    z: np.ndarray  # (n_cells, 4)

    @property
    def n_cells(self) -> int:
        return len(self.x)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])


def l2_norm(z: np.ndarray, dx: float) -> float:
    """sqrt(int |z|^2 dx) with all four SI components summed unweighted."""
    return float(np.sqrt(dx * np.sum(z * z)))


def initial_condition(scenario: Scenario, nominal: ModeLinearization | None = None) -> StateProfile:
    """Sinusoidal stop-and-go profile scaled by the nominal equilibrium values."""
    p = scenario.params
    if nominal is None:
        nominal = linearize(p, scenario.modes.nominal)
    x = cell_centers(p.L, scenario.n_cells)
    scale = np.array([p.rho1_star, nominal.v1_star, p.rho2_star, nominal.v2_star])
    amp = np.asarray(scenario.ic.amplitudes) * scale
    k = np.asarray(scenario.ic.wavenumbers)
    z = amp[None, :] * np.sin(2 * np.pi * np.outer(x, k) / p.L)
    return StateProfile(x, z)


class ModeGrid:
    """Per-mode matrices sampled at the cell centres."""

    def __init__(self, mode: ModeLinearization, x: np.ndarray):
        self.mode = mode
        self.x = x
        self.T, self.Tinv = mode.riemann_transform(x)
        self.theta = mode.theta(x)
        self.speeds = mode.speeds
        self.Q = mode.Q
        self.R = mode.R
        self.u_bar_gain = mode.u_bar_gain

    def to_riemann(self, z):
        return np.einsum("kij,kj->ki", self.T, z)

    def to_physical(self, w):
        return np.einsum("kij,kj->ki", self.Tinv, w)


def step_riemann(w: np.ndarray, g: ModeGrid, u_bar: float, dt: float, dx: float) -> np.ndarray:
    """One upwind/explicit-Euler step of the Riemann system in place of ``w``."""
    s = g.speeds
    nu = dt / dx * s
    out = w + dt * np.einsum("kij,kj->ki", g.theta, w)
    # downstream-moving w1..w3: inflow w+(0) = Q w-(0)
    left = g.Q * w[0, 3]
    for c in range(3):
        up = np.empty_like(w[:, c])
        up[0] = left[c]
        up[1:] = w[:-1, c]
        out[:, c] -= nu[c] * (w[:, c] - up)
    # upstream-moving w4: w-(L) = R w+(L) + Ubar
    right = g.R @ w[-1, :3] + u_bar
    down = np.empty_like(w[:, 3])
    down[-1] = right
    down[:-1] = w[1:, 3]
    out[:, 3] -= nu[3] * (down - w[:, 3])
    return out


def step(z: StateProfile, g: ModeGrid, controller: Controller | None, t: float,
         dt: float) -> tuple[StateProfile, float]:
    """Advance one step in mode ``g``; returns the new profile and applied U."""
    if g.mode.lam[3] >= 0 or np.any(g.mode.lam[:3] <= 0):
        raise ModelError(f"active mode s2={g.mode.s2} is not congested")
    dx = z.dx
    limit = dx / np.max(np.abs(g.speeds))
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.4g} violates CFL limit {limit:.4g}")
    U = control_input(controller, z.z, t) if controller is not None else 0.0
    w = g.to_riemann(z.z)
    w = step_riemann(w, g, U * g.u_bar_gain, dt, dx)
    return StateProfile(z.x, g.to_physical(w)), U


@dataclass
class Trace:
    t: np.ndarray
    l2: np.ndarray
    U: np.ndarray
    mode_index: np.ndarray
    snapshot_t: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # list of (n_cells, 4) arrays
    lyapunov: np.ndarray | None = None
    x: np.ndarray | None = None
    path: ModePath | None = None

    @property
    def l2_sq(self) -> np.ndarray:
        return self.l2 ** 2


class Simulator:
    """Holds the per-mode grids, the global step and (optionally) the controller.

    Building one is the expensive part (kernel solve); realizations reuse it.
    """

    def __init__(self, scenario: Scenario, kernels: KernelGrid | None = None):
        self.scenario = scenario
        p = scenario.params
        self.x = cell_centers(p.L, scenario.n_cells)
        self.dx = p.L / scenario.n_cells
        self.nominal = linearize(p, scenario.modes.nominal)
        self.modes = [linearize(p, s) for s in scenario.modes.states]
        self.grids = [ModeGrid(m, self.x) for m in self.modes]
        vmax = max(np.max(np.abs(m.lam)) for m in self.modes + [self.nominal])
        self.dt = scenario.cfl * self.dx / vmax
        self.controller = None
        self.kernels = kernels
        if scenario.loop == "closed":
            if self.kernels is None:
                self.kernels = solve_kernels(self.nominal, scenario.kernel_n,
                                             scenario.kernel_tol, scenario.kernel_max_iter)
            self.controller = build_controller(self.nominal, self.kernels, scenario.n_cells)

    def n_steps(self) -> int:
        return int(np.ceil(self.scenario.horizon / self.dt - 1e-9))

    def sample_path(self, seed: int | None = None) -> ModePath:
        sc = self.scenario
        if sc.path is not None:
            return sc.path
        seed = sc.seed if seed is None else seed
        return sample_path(sc.chain, seed, max(sc.horizon, 1e-12))

    def run(self, seed: int | None = None, path: ModePath | None = None,
            z0: StateProfile | None = None, snapshot_every: float | None = None,
            monitor=None) -> Trace:
        """One realization.  ``monitor(z, mode_index) -> float`` (e.g. a
        Lyapunov functional) is evaluated at every recorded time if given."""
        sc = self.scenario
        if path is None:
            path = self.sample_path(seed)
        z = z0 if z0 is not None else initial_condition(sc, self.nominal)
        every = sc.snapshot_every if snapshot_every is None else snapshot_every
        n = self.n_steps() if sc.horizon > 0 else 0
        dt = self.dt
        ts = np.arange(n + 1) * dt
        ts[-1] = min(ts[-1], max(sc.horizon, 0.0)) if n else 0.0
        l2 = np.empty(n + 1)
        U = np.zeros(n + 1)
        modes = np.empty(n + 1, dtype=int)
        snap_t, snaps = [0.0], [z.z.copy()]
        next_snap = every
        l2[0] = l2_norm(z.z, self.dx)
        modes[0] = mode_at(path, 0.0)
        lyap = np.empty(n + 1) if monitor is not None else None
        if lyap is not None:
            lyap[0] = monitor(z.z, modes[0])
        for k in range(n):
            t = k * dt
            h = min(dt, sc.horizon - t)
            i = mode_at(path, t)
            z, u = step(z, self.grids[i], self.controller, t, h)
            U[k] = u
            t1 = t + h
            l2[k + 1] = l2_norm(z.z, self.dx)
            modes[k + 1] = mode_at(path, min(t1, path.horizon))
            if lyap is not None:
                lyap[k + 1] = monitor(z.z, modes[k + 1])
            if t1 >= next_snap - 1e-9 or k == n - 1:
                snap_t.append(t1)
                snaps.append(z.z.copy())
                while next_snap <= t1 + 1e-9:
                    next_snap += every
        if n:
            ts[-1] = sc.horizon
            U[n] = control_input(self.controller, z.z) if self.controller is not None else 0.0
        return Trace(ts, l2, U, modes, snap_t, snaps, lyap, self.x, path)


def run(scenario: Scenario, seed: int | None = None) -> Trace:
    return Simulator(scenario).run(seed)
