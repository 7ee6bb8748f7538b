"""Continuous-time Markov chain on the AV spacing states.

Rates ``tau[i, j](t)`` may depend on time.  Transition probabilities follow
the Kolmogorov forward equations; sample paths are drawn by thinning against
the uniform bound ``tau_star * r``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import ConfigError, SpacingModeSet


class PaperRateTable:
    """Time-varying rate table with endpoint/interior structure.

    Endpoint states leave at ``2 r`` to every other state, interior states
    reach an endpoint at ``0.1 r`` and other interior states at
    ``r (1 + 2 cos^2(s (i + 5 j) t))`` with 1-based indices i, j.
    """

    def __init__(self, r_scale: float, s_scale: float, n_states: int = 5):
        if n_states < 2:
            raise ValueError("need at least two states")
        self.r_scale = float(r_scale)
        self.s_scale = float(s_scale)
        self.n = n_states
        n = n_states
        i = np.arange(1, n + 1)[:, None]
        j = np.arange(1, n + 1)[None, :]
        endpoint_i = (i == 1) | (i == n)
        endpoint_j = (j == 1) | (j == n)
        self._const = np.where(endpoint_i, 2.0 * r_scale,
                               np.where(endpoint_j, 0.1 * r_scale, 0.0))
        self._varying = (~endpoint_i) & (~endpoint_j) & (i != j)
        self._freq = s_scale * (i + 5 * j)
        np.fill_diagonal(self._const, 0.0)

    @property
    def tau_star(self) -> float:
        return 3.0 * self.r_scale

    def __call__(self, t):
        """Rates at time(s) ``t``; shape (..., n, n)."""
        t = np.asarray(t, dtype=float)
        c = np.cos(self._freq * t[..., None, None])
        var = self.r_scale * (1.0 + 2.0 * c * c)
        return np.where(self._varying, var, self._const)

    def into(self, t, j):
        """Rates tau[:, j_k](t_k) for paired arrays t, j; shape (len(t), n)."""
        t = np.asarray(t, dtype=float)
        j = np.asarray(j)
        c = np.cos(self._freq.T[j] * t[:, None])
        var = self.r_scale * (1.0 + 2.0 * c * c)
        return np.where(self._varying.T[j], var, self._const.T[j])


class ConstantRates:
    def __init__(self, matrix):
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("rate matrix must be square")
        if np.any(m < 0):
            raise ValueError("rates must be non-negative")
        np.fill_diagonal(m, 0.0)
        self.matrix = m

    @property
    def tau_star(self) -> float:
        return float(self.matrix.max())

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(self.matrix, t.shape + self.matrix.shape).copy()

    def into(self, t, j):
        return self.matrix.T[np.asarray(j)]


def paper_rate_table(r_scale: float, s_scale: float, n_states: int = 5) -> PaperRateTable:
    return PaperRateTable(r_scale, s_scale, n_states)


@dataclass(frozen=True, eq=False)
class ChainSpec:
    mode_set: SpacingModeSet
    rate_fn: Callable
    tau_star: float
    initial_distribution: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.initial_distribution, dtype=float)
        r = self.mode_set.r
        if p.shape != (r,):
            raise ConfigError(f"initial distribution has {p.size} entries, expected {r}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("initial distribution must be non-negative and sum to 1")
        if self.tau_star < 0:
            raise ConfigError("tau_star must be non-negative")
        rates = self.rate_fn(0.0)
        if rates.shape != (r, r):
            raise ConfigError(f"rate table is {rates.shape}, expected {(r, r)}")

    @property
    def r(self) -> int:
        return self.mode_set.r

    def generator(self, t):
        """Forward generator G with G[k, j] = tau_kj, G[j, j] = -sum_k tau_jk."""
        tau = self.rate_fn(t)
        out = tau.copy()
        idx = np.arange(self.r)
        out[..., idx, idx] = -tau.sum(axis=-1)
        return out

    def with_rates(self, rate_fn, tau_star=None) -> "ChainSpec":
        return ChainSpec(self.mode_set, rate_fn,
                         rate_fn.tau_star if tau_star is None else tau_star,
                         self.initial_distribution)


def chain_from_config(modes: SpacingModeSet, section: dict) -> ChainSpec:
    r = modes.r
    p0 = section.get("initial_probabilities")
    if p0 is None:
        p0 = np.full(r, 1.0 / r)
    if "rate_matrix" in section:
        rates = ConstantRates(section["rate_matrix"])
    else:
        rates = PaperRateTable(float(section.get("r_scale", 10.0)),
                               float(section.get("s_scale", 0.001)), r)
    if rates(0.0).shape != (r, r):
        raise ConfigError(f"[markov] rate table does not match {r} states")
    return ChainSpec(modes, rates, rates.tau_star, np.asarray(p0, dtype=float))


def single_mode_chain(modes: SpacingModeSet, index: int) -> ChainSpec:
    """A chain that never leaves state ``index``."""
    p0 = np.zeros(modes.r)
    p0[index] = 1.0
    return ChainSpec(modes, ConstantRates(np.zeros((modes.r, modes.r))), 0.0, p0)


@dataclass(frozen=True)
class ProbabilityTrace:
    t_grid: np.ndarray
    P: np.ndarray  # (nt, r, r), raw (not renormalised)

    def marginals(self, p0) -> np.ndarray:
        """State distribution p0 @ P(0, t) at each recorded time."""
        return np.einsum("i,tij->tj", np.asarray(p0, dtype=float), self.P)


def kolmogorov_forward(chain: ChainSpec, horizon: float, dt: float,
                       record_every: float | None = None) -> ProbabilityTrace:
    """RK4 integration of dP/dt = P G(t), P(0) = I."""
    if dt <= 0 or horizon < 0:
        raise ValueError("dt must be positive and horizon non-negative")
    if chain.tau_star > 0 and dt > 0.1 / chain.tau_star:
        raise ConfigError(f"dt={dt} exceeds the stability limit 0.1/tau_star="
                          f"{0.1 / chain.tau_star:.4g}")
    n_steps = int(np.ceil(horizon / dt - 1e-9)) if horizon > 0 else 0
    h = horizon / n_steps if n_steps else dt
    stride = 1 if record_every is None else max(1, int(round(record_every / h)))
    # generators at all stage times: G(t_k), G(t_k + h/2), G(t_k + h)
    tg = np.arange(2 * n_steps + 1) * (h / 2)
    G = chain.generator(tg)
    r = chain.r
    P = np.eye(r)
    times, out = [0.0], [P.copy()]
    for k in range(n_steps):
        G0, G1, G2 = G[2 * k], G[2 * k + 1], G[2 * k + 2]
        k1 = P @ G0
        k2 = (P + 0.5 * h * k1) @ G1
        k3 = (P + 0.5 * h * k2) @ G1
        k4 = (P + h * k3) @ G2
        P = P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            times.append((k + 1) * h)
            out.append(P.copy())
    return ProbabilityTrace(np.array(times), np.array(out))


@dataclass(frozen=True)
class ModePath:
    """Right-continuous piecewise-constant path: mode_indices[k] on [jump_times[k], jump_times[k+1])."""

    jump_times: tuple[float, ...]
    mode_indices: tuple[int, ...]
    horizon: float

    def __post_init__(self):
        if len(self.jump_times) != len(self.mode_indices) or not self.jump_times:
            raise ValueError("jump_times and mode_indices must be non-empty and equally long")
        if self.jump_times[0] != 0.0:
            raise ValueError("paths start at t = 0")
        if len(self.jump_times) > 1 and np.any(np.diff(self.jump_times) <= 0):
            raise ValueError("jump times must be strictly increasing")

    @classmethod
    def constant(cls, index: int, horizon: float) -> "ModePath":
        return cls((0.0,), (int(index),), float(horizon))

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times) - 1


def mode_at(path: ModePath, t: float) -> int:
    if t < 0 or t > path.horizon:
        raise ValueError(f"t={t} outside [0, {path.horizon}]")
    k = bisect.bisect_right(path.jump_times, t) - 1
    return path.mode_indices[k]


def sample_path(chain: ChainSpec, seed: int, horizon: float) -> ModePath:
    """Exact path sample by thinning against the bound tau_star * r."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    r = chain.r
    state = int(rng.choice(r, p=chain.initial_distribution))
    bound = chain.tau_star * r
    if bound <= 0:
        return ModePath.constant(state, horizon)

    chunk = int(bound * horizon * 1.05) + 64
    gaps = rng.exponential(1.0 / bound, size=chunk)
    times = np.cumsum(gaps)
    while times[-1] <= horizon:
        more = np.cumsum(rng.exponential(1.0 / bound, size=chunk)) + times[-1]
        times = np.concatenate([times, more])
    times = times[times <= horizon]
    # Each proposal names a uniform target j and is accepted from state i with
    # probability tau_ij(t) / tau_star, i.e. i -> j w.p. tau_ij(t) / (tau_star r).
    target = rng.integers(0, r, size=times.size)
    u = rng.random(times.size) * chain.tau_star
    accept = _rates_into(chain.rate_fn, times, target) > u[:, None]
    # bit i of mask[k] says whether proposal k is accepted from state i
    mask = accept.astype(np.int64) @ (1 << np.arange(r, dtype=np.int64))
    keep = mask != 0

    jt, jm = [0.0], [state]
    for tk, j, bits in zip(times[keep].tolist(), target[keep].tolist(), mask[keep].tolist()):
        if j != state and (bits >> state) & 1:
            state = j
            jt.append(tk)
            jm.append(j)
    return ModePath(tuple(jt), tuple(jm), float(horizon))


def _rates_into(rate_fn, t, j):
    if hasattr(rate_fn, "into"):
        return rate_fn.into(t, j)
    full = rate_fn(t)  # (N, r, r)
    return np.take_along_axis(full, np.asarray(j)[:, None, None], axis=2)[..., 0]


def occupancy(paths, t: float, r: int) -> np.ndarray:
    counts = np.zeros(r)
    for p in paths:
        counts[mode_at(p, t)] += 1
    return counts / max(len(paths), 1)
