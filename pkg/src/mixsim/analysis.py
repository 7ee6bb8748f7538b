"""Empirical stability certificates for the closed loop.

Stability is checked numerically rather than through the conservative proof
constants: decay of the weighted Lyapunov functional, log-linear fits of
the ensemble mean square, and direct evaluation of the perturbation terms
that appear when the nominal kernels act on a different spacing mode.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backstepping import (Couplings, KernelGrid, apply_backstepping,
                           backstepping_operator, solve_kernels)
from .model import ModeLinearization
from .sim import ModeGrid, Scenario, Simulator, StateProfile, Trace, l2_norm

log = logging.getLogger(__name__)


class CertificationError(RuntimeError):
    pass


class RealizationError(RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"realization with seed {seed} failed: {cause}")
        self.seed = seed


@dataclass(frozen=True)
class LyapunovConfig:
    nu: float
    a: float

    def __post_init__(self):
        if self.nu <= 0 or self.a <= 0:
            raise ValueError("nu and a must be positive")


def weights(mode: ModeLinearization, x: np.ndarray, cfg: LyapunovConfig) -> np.ndarray:
    """Diagonal of D_j(x) for the active mode, shape (len(x), 4)."""
    lp = mode.lam_plus
    mu = mode.lam_minus
    D = np.empty((len(x), 4))
    D[:, :3] = np.exp(-cfg.nu * np.outer(x, 1.0 / lp)) / lp
    D[:, 3] = cfg.a * np.exp(cfg.nu * x / mu) / mu
    return D


class LyapunovMonitor:
    """V = int theta^T D_j theta dx with theta = K0(T_j z), on a fixed grid."""

    def __init__(self, kernels: KernelGrid, grids: list[ModeGrid], cfg: LyapunovConfig):
        self.grids = grids
        self.cfg = cfg
        self.x = grids[0].x
        self.dx = float(self.x[1] - self.x[0])
        self.G = backstepping_operator(kernels, len(self.x))
        self.D = [weights(g.mode, self.x, cfg) for g in grids]

    def target_state(self, z: np.ndarray, i: int) -> np.ndarray:
        return apply_backstepping(self.G, self.grids[i].to_riemann(z))

    def __call__(self, z: np.ndarray, i: int) -> float:
        th = self.target_state(z, i)
        return float(self.dx * np.sum(self.D[i] * th * th))


def lyapunov_value(z: StateProfile, active_mode: ModeLinearization, nominal_kernels: KernelGrid,
                   cfg: LyapunovConfig) -> float:
    mon = LyapunovMonitor(nominal_kernels, [ModeGrid(active_mode, z.x)], cfg)
    return mon(z.z, 0)


def select_a(modes: list[ModeLinearization], margin: float = 1.1, floor: float = 1e-6) -> float:
    """a = margin * max_j |Q_j|^2, floored for the degenerate Q = 0 case."""
    q2 = max(float(np.sum(m.Q ** 2)) for m in modes)
    return margin * q2 if q2 > 0 else floor


def is_nonincreasing(values, rel_slack: float = 1e-3) -> bool:
    v = np.asarray(values)
    return bool(np.all(v[1:] <= v[:-1] * (1 + rel_slack) + 1e-300))


def select_lyapunov_params(nominal_mode: ModeLinearization, simulator: Simulator | None = None,
                           modes: list[ModeLinearization] | None = None,
                           nu0: float = 1.0, nu_min: float = 1e-4,
                           periods: float = 1.5) -> LyapunovConfig:
    """Pick (nu, a) with V0 numerically decreasing in the nominal closed loop.

    ``nu`` is halved from ``nu0`` until V0(t) is nonincreasing after one
    transport period L / min|lambda|.  The check runs over at least
    ``periods`` transport periods whatever the scenario horizon.  Without a
    simulator only ``a`` is computed and ``nu0`` is returned.
    """
    a = select_a(modes if modes else [nominal_mode])
    if simulator is None:
        return LyapunovConfig(nu0, a)
    if simulator.scenario.loop != "closed":
        raise ValueError("nu selection needs a closed-loop simulator")
    nom_idx = _nominal_grid_index(simulator)
    t0 = nominal_mode.L / np.min(np.abs(nominal_mode.lam))
    horizon = max(simulator.scenario.horizon, periods * t0)
    if horizon > simulator.scenario.horizon:
        simulator = Simulator(simulator.scenario.with_(horizon=horizon), kernels=simulator.kernels)
    path = _constant_path(nom_idx, horizon)
    tr = simulator.run(path=path, snapshot_every=simulator.dt)
    grids = simulator.grids if nom_idx is not None else [ModeGrid(nominal_mode, simulator.x)]
    i = nom_idx if nom_idx is not None else 0
    nu = nu0
    while nu >= nu_min:
        cfg = LyapunovConfig(nu, a)
        mon = LyapunovMonitor(simulator.kernels, grids, cfg)
        ts = np.asarray(tr.snapshot_t)
        vals = [mon(s, i) for t, s in zip(ts, tr.snapshots) if t >= t0]
        if len(vals) >= 2 and is_nonincreasing(vals):
            return cfg
        nu /= 2
    raise CertificationError(f"no nu >= {nu_min} gives a decreasing Lyapunov functional")


def _nominal_grid_index(sim: Simulator):
    for k, m in enumerate(sim.modes):
        if m.s2 == sim.nominal.s2:
            return k
    return None


def _constant_path(index, horizon):
    from .markov import ModePath
    return ModePath.constant(0 if index is None else index, max(horizon, 1e-12))


@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    r_squared: float


def fit_decay_rate(t, values, window=None) -> DecayFit:
    """Least squares of log(value) against t; rate is minus the slope."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, v = t[sel], v[sel]
    if t.size < 2:
        raise ValueError("need at least two samples in the fit window")
    if np.any(v <= 0):
        raise ValueError("values must be positive on the fit window")
    y = np.log(v)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-24 else 0.0)
    rate = -slope
    if abs(rate) < 1e-14:
        rate = 0.0
    return DecayFit(float(rate), float(math.exp(intercept)), float(r2))


@dataclass(frozen=True)
class EnsembleResult:
    t_grid: np.ndarray
    mean_sq: np.ndarray
    stderr: np.ndarray
    fitted_zeta: float
    fitted_varsigma: float
    r_squared: float
    n_realizations: int
    window: tuple[float, float]
    prefactor: float = float("nan")

    def envelope_ok(self, n_se: float = 2.0) -> bool:
        """Mean square within prefactor*exp(-zeta t) + n_se stderr on the window."""
        t, m, s = self.t_grid, self.mean_sq, self.stderr
        sel = (t >= self.window[0]) & (t <= self.window[1])
        env = self.prefactor * np.exp(-self.fitted_zeta * t[sel])
        return bool(np.all(m[sel] <= env * _fit_band(self) + n_se * s[sel]))


def _fit_band(res: EnsembleResult) -> float:
    # log-residual spread of the fit itself (the envelope is a fit, not a bound)
    t, m = res.t_grid, res.mean_sq
    sel = (t >= res.window[0]) & (t <= res.window[1])
    resid = np.log(m[sel]) - (math.log(res.prefactor) - res.fitted_zeta * t[sel])
    return float(np.exp(np.max(resid)))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MIXSIM_THREADS", "1")))
    except ValueError:
        return 1


def mean_square_ensemble(scenario: Scenario, n_realizations: int, base_seed: int = 0,
                         window: tuple[float, float] | None = None,
                         simulator: Simulator | None = None) -> EnsembleResult:
    """Average ||z||^2(t) over independent seeded closed-loop realizations."""
    if n_realizations < 1:
        raise ValueError("need at least one realization")
    sim = simulator or Simulator(scenario)
    if window is None:
        window = (0.125 * scenario.horizon, 0.75 * scenario.horizon)
    seeds = [base_seed + k for k in range(n_realizations)]

    def one(seed):
        try:
            return sim.run(seed=seed, snapshot_every=max(scenario.horizon, sim.dt)).l2_sq
        except Exception as exc:  # surface the failing seed
            raise RealizationError(seed, exc) from exc

    nt = _threads()
    if nt > 1:
        with ThreadPoolExecutor(nt) as pool:
            rows = list(pool.map(one, seeds))
    else:
        rows = [one(s) for s in seeds]
    data = np.array(rows)
    t = np.arange(data.shape[1]) * sim.dt
    t[-1] = scenario.horizon if data.shape[1] > 1 else 0.0
    mean = data.mean(axis=0)
    se = data.std(axis=0, ddof=1) / math.sqrt(n_realizations) if n_realizations > 1 \
        else np.zeros_like(mean)
    zeta = varsigma = r2 = pref = float("nan")
    sel = (t >= window[0]) & (t <= window[1])
    if np.all(mean[sel] > 0) and np.count_nonzero(sel) >= 2:
        fit = fit_decay_rate(t, mean, window)
        zeta, pref, r2 = fit.rate, fit.prefactor, fit.r_squared
        varsigma = pref / mean[0] if mean[0] > 0 else float("nan")
    return EnsembleResult(t, mean, se, zeta, varsigma, r2, n_realizations, tuple(window), pref)


# ---------------------------------------------------------------------------
# perturbation terms of the target system in mode j


def _diag_deriv(F, h, i, j):
    """Derivative along (1, 1) at node (i, j); the line holds (i+k, j+k), -j <= k <= n-i."""
    n = F.shape[-1] - 1
    if j >= 1 and i + 1 <= n:
        return (F[..., i + 1, j + 1] - F[..., i - 1, j - 1]) / (2 * h)
    if i + 2 <= n:
        return (-3 * F[..., i, j] + 4 * F[..., i + 1, j + 1] - F[..., i + 2, j + 2]) / (2 * h)
    return (3 * F[..., i, j] - 4 * F[..., i - 1, j - 1] + F[..., i - 2, j - 2]) / (2 * h)


def _grad_tri(F, h):
    """(d/dx, d/dxi) on the triangle grid F[..., i, j] (j <= i), second order.

    Central differences where the stencil fits, one-sided second-order
    stencils at the edges.  Nodes where one direction has only two points
    (row 1, the last two diagonal nodes, the corner region) use the
    derivative along the diagonal, F_x + F_xi, and the other component.
    """
    n = F.shape[-1] - 1
    if n < 4:
        raise ValueError("triangle derivatives need n >= 4")
    Dx = np.full_like(F, np.nan)
    Dxi = np.full_like(F, np.nan)
    for i in range(2, n + 1):
        j = np.arange(1, i)
        Dxi[..., i, j] = (F[..., i, j + 1] - F[..., i, j - 1]) / (2 * h)
        Dxi[..., i, 0] = (-3 * F[..., i, 0] + 4 * F[..., i, 1] - F[..., i, 2]) / (2 * h)
        Dxi[..., i, i] = (3 * F[..., i, i] - 4 * F[..., i, i - 1] + F[..., i, i - 2]) / (2 * h)
    for i in range(n + 1):
        # column j has rows j..n
        if 0 < i < n:
            c = np.arange(i)
            Dx[..., i, c] = (F[..., i + 1, c] - F[..., i - 1, c]) / (2 * h)
        if i + 2 <= n:
            Dx[..., i, i] = (-3 * F[..., i, i] + 4 * F[..., i + 1, i] - F[..., i + 2, i]) / (2 * h)
        if i == n:
            c = np.arange(n - 1)
            Dx[..., n, c] = (3 * F[..., n, c] - 4 * F[..., n - 1, c] + F[..., n - 2, c]) / (2 * h)
    # rows 0 and 1: xi-derivative from the diagonal identity
    for (i, j) in ((0, 0), (1, 0), (1, 1)):
        Dxi[..., i, j] = _diag_deriv(F, h, i, j) - Dx[..., i, j]
    # last two diagonal-adjacent nodes: x-derivative from the identity
    for (i, j) in ((n - 1, n - 1), (n, n - 1), (n, n)):
        Dx[..., i, j] = _diag_deriv(F, h, i, j) - Dxi[..., i, j]
    return Dx, Dxi


def _dx_tri(F, h):
    return _grad_tri(F, h)[0]


def _dxi_tri(F, h):
    return _grad_tri(F, h)[1]


@dataclass(frozen=True)
class FTermNorms:
    s2: float
    f1: float
    f2: float
    f3: float
    f4: float

    @property
    def max(self) -> float:
        return max(self.f1, self.f2, self.f3, self.f4)


def f_term_norms(kernels: KernelGrid, modes: list[ModeLinearization]) -> list[FTermNorms]:
    """Sup-norms over the triangle of the four perturbation terms for each mode.

    The nominal kernels satisfy the kernel equations of the nominal mode, so
    every term vanishes (up to discretization) there.
    """
    n, h = kernels.n, kernels.h
    xg = np.linspace(0.0, kernels.L, n + 1)
    K, N = kernels.K, kernels.N
    Kx, Kxi = _dx_tri(K, h), _dxi_tri(K, h)
    Nx, Nxi = _dx_tri(N, h), _dxi_tri(N, h)
    ii, jj = np.tril_indices(n + 1)
    xi = xg[jj]
    d = np.arange(n + 1)
    out = []
    for mode in modes:
        cp = Couplings.of(mode)
        mu, lp = cp.mu, cp.lam_plus
        Kd = K[:, d, d]
        f1 = np.array([cp.entry(3, m, xg) for m in range(3)]) + (mu + lp)[:, None] * Kd
        f2 = -(lp * mode.Q) @ K[:, :, 0] + mu * N[:, 0]
        f3 = np.empty((3, ii.size))
        for m in range(3):
            f3[m] = mu * Kx[m, ii, jj] - lp[m] * Kxi[m, ii, jj]
            f3[m] -= sum(K[l, ii, jj] * cp.entry(l, m, xi) for l in range(3))
            f3[m] -= N[ii, jj] * cp.entry(3, m, xi)
        f4 = mu * (Nx[ii, jj] + Nxi[ii, jj]) - sum(K[l, ii, jj] * cp.entry(l, 3, xi)
                                                   for l in range(3))
        out.append(FTermNorms(mode.s2,
                              float(np.max(np.linalg.norm(f1, axis=0))),
                              float(np.max(np.abs(f2))),
                              float(np.max(np.linalg.norm(f3, axis=0))),
                              float(np.max(np.abs(f4)))))
    return out


@dataclass(frozen=True)
class LinearBoundFit:
    M0: float           # least-squares slope through the origin
    r_squared: float
    envelope: float     # smallest constant with max-norm <= c |ds| over the modes
    floor: float        # max-norm at the nominal spacing (discretization level)


def fit_linear_bound(norms: list[FTermNorms], s2_nominal: float) -> LinearBoundFit:
    ds = np.array([abs(f.s2 - s2_nominal) for f in norms])
    y = np.array([f.max for f in norms])
    nom = ds == 0
    floor = float(y[nom].max()) if nom.any() else 0.0
    x, yy = ds[~nom], y[~nom] - floor
    if x.size == 0:
        return LinearBoundFit(0.0, float("nan"), 0.0, floor)
    M0 = float(np.sum(x * yy) / np.sum(x * x))
    ss_res = float(np.sum((yy - M0 * x) ** 2))
    ss_tot = float(np.sum(yy ** 2))  # uncentred, regression through the origin
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    env = float(np.max(yy / x))
    return LinearBoundFit(M0, r2, env, floor)


# ---------------------------------------------------------------------------
# target-system check in the nominal loop


@dataclass(frozen=True)
class BetaResidual:
    sup: float
    l2: float
    boundary: float  # sup |beta(L, t)| over the checked times


def beta_series(trace: Trace, kernels: KernelGrid, nominal: ModeLinearization) -> np.ndarray:
    """beta(x, t) = fourth component of K0(T0 z) for each snapshot, shape (nt, n)."""
    x = trace.x
    g = ModeGrid(nominal, x)
    G = backstepping_operator(kernels, len(x))
    return np.array([apply_backstepping(G, g.to_riemann(z))[:, 3] for z in trace.snapshots])


def target_beta_residual(trace: Trace, kernels: KernelGrid, nominal: ModeLinearization,
                         t_window: tuple[float, float] | None = None) -> BetaResidual:
    """Finite-difference residual of beta_t - mu beta_x on the snapshot grid.

    Central differences in time and space on interior points.  ``boundary``
    is sup |beta(L, t)| with beta extrapolated linearly to the face.
    """
    ts = np.asarray(trace.snapshot_t)
    if ts.size < 3:
        raise ValueError("need at least three snapshots")
    dts = np.diff(ts)
    dt = float(np.median(dts))
    dx = float(trace.x[1] - trace.x[0])
    mu = nominal.lam_minus
    if np.any(np.abs(dts[:-1] - dt) > 1e-6 * dt) or dt * mu > 2 * dx:
        raise ValueError("snapshot cadence too sparse or irregular for time differencing")
    B = beta_series(trace, kernels, nominal)
    bt = (B[2:, 1:-1] - B[:-2, 1:-1]) / (2 * dt)
    bx = (B[1:-1, 2:] - B[1:-1, :-2]) / (2 * dx)
    r = bt - mu * bx
    tc = ts[1:-1]
    sel = np.ones(tc.size, dtype=bool)
    if t_window is not None:
        sel = (tc >= t_window[0]) & (tc <= t_window[1])
    r = r[sel]
    if r.size == 0:
        return BetaResidual(0.0, 0.0, 0.0)
    boundary = float(np.max(np.abs(1.5 * B[1:-1, -1] - 0.5 * B[1:-1, -2])[sel]))
    l2 = float(np.sqrt(np.sum(r * r) * dx * dt))
    return BetaResidual(float(np.max(np.abs(r))), l2, boundary)
