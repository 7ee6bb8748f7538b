"""Backstepping kernels on the triangle 0 <= xi <= x <= L and the nominal control law.

Kernel equations (mu = -lambda4 > 0, Lambda+ = diag(lambda2, lambda3, lambda1))::

    mu K_x - K_xi Lambda+ =  K Sigma++(xi) + N Sigma-+(xi)
    mu (N_x + N_xi)       =  K Sigma+-(xi)
    K(x, x)  = -Sigma-+(x) (mu I + Lambda+)^-1
    N(x, 0)  =  K(x, 0) Lambda+ Q / mu

They are solved by successive approximations of the integral form obtained
by integrating along characteristics.  K_m is constant-coefficient transport
along (dx, dxi) = (mu, -lambda_m) starting from the diagonal; N is transported
along (1, 1) starting from the edge xi = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import ModeLinearization

log = logging.getLogger(__name__)


class KernelError(RuntimeError):
    def __init__(self, msg, residual=float("nan")):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class Couplings:
    """Sigma blocks of one mode as closed-form functions of position."""

    lam_plus: np.ndarray
    mu: float
    Jp: np.ndarray
    decay: np.ndarray

    @classmethod
    def of(cls, mode: ModeLinearization) -> "Couplings":
        from .model import PERM
        p = list(PERM)
        return cls(mode.lam_plus.copy(), mode.lam_minus, mode.Jhat[np.ix_(p, p)].copy(),
                   mode.decay.copy())

    @classmethod
    def zero(cls, mode: ModeLinearization) -> "Couplings":
        return cls(mode.lam_plus.copy(), mode.lam_minus, np.zeros((4, 4)), mode.decay.copy())

    def entry(self, r: int, c: int, x):
        """Theta_rc(x) for r != c."""
        return self.Jp[r, c] * np.exp((self.decay[c] - self.decay[r]) * np.asarray(x))


@dataclass(frozen=True, eq=False)
class KernelGrid:
    n: int
    L: float
    K: np.ndarray  # (3, n+1, n+1), entry [m, i, j] = k_m(x_i, xi_j); j > i unused
    N: np.ndarray  # (n+1, n+1)
    converged: bool
    iterations: int
    residual: float

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def nodes(self):
        x = np.linspace(0.0, self.L, self.n + 1)
        i, j = np.tril_indices(self.n + 1)
        return x[i], x[j]

    def interp(self, x, xi):
        """Piecewise-linear interpolation of (k1, k2, k3, N) at points with xi <= x.

        The square cells are split along lines parallel to the diagonal so
        only nodes inside the triangle are ever used.
        """
        return _interp(np.concatenate([self.K, self.N[None]]), self.n, self.L, x, xi)

    @classmethod
    def zeros(cls, n: int, L: float) -> "KernelGrid":
        return cls(n, L, np.zeros((3, n + 1, n + 1)), np.zeros((n + 1, n + 1)), True, 0, 0.0)


def _interp(F, n, L, x, xi):
    u = np.clip(np.asarray(x) * (n / L), 0.0, n)
    v = np.clip(np.asarray(xi) * (n / L), 0.0, n)
    v = np.minimum(v, u)
    i = np.minimum(np.floor(u).astype(int), n - 1)
    j = np.minimum(np.floor(v).astype(int), n - 1)
    a = u - i
    b = v - j
    lower = b <= a
    # lower triangle (i,j),(i+1,j),(i+1,j+1); upper (i,j),(i,j+1),(i+1,j+1)
    w0 = np.where(lower, 1.0 - a, 1.0 - b)
    w1 = np.where(lower, a - b, b - a)
    w2 = np.where(lower, b, a)
    i1 = np.where(lower, i + 1, i)
    j1 = np.where(lower, j, j + 1)
    return w0 * F[:, i, j] + w1 * F[:, i1, j1] + w2 * F[:, i + 1, j + 1]


def diagonal_data(cp: Couplings, x):
    """k_m(x, x) = -Sigma-+_m(x) / (mu + lambda+_m), shape (3, len(x))."""
    out = []
    for m in range(3):
        denom = cp.mu + cp.lam_plus[m]
        if abs(denom) < 1e-12 * max(cp.mu, 1.0):
            raise KernelError(f"degenerate diagonal condition for k{m + 1}")
        out.append(-cp.entry(3, m, x) / denom)
    return np.array(out)


def _trapz_weights(nq):
    w = np.ones(nq)
    w[0] = w[-1] = 0.5
    return w / (nq - 1)


def solve_kernels(mode: ModeLinearization, n: int = 64, tol: float = 1e-8,
                  max_iter: int = 200, couplings: Couplings | None = None,
                  raise_on_failure: bool = True) -> KernelGrid:
    """Successive approximations of the kernel integral equations.

    ``tol`` is relative: the sup-norm change between iterates divided by the
    sup-norm of the current iterate.
    """
    if n < 16:
        raise ValueError("kernel grid needs n >= 16")
    cp = couplings if couplings is not None else Couplings.of(mode)
    L = mode.L
    mu = cp.mu
    lp = cp.lam_plus
    xg = np.linspace(0.0, L, n + 1)
    ii, jj = np.tril_indices(n + 1)
    X, XI = xg[ii], xg[jj]
    nq = n + 1
    s = np.linspace(0.0, 1.0, nq)
    wq = _trapz_weights(nq)

    # K_m characteristics: from diagonal point xd to the node, parameter length (x-xi)/(mu+lam)
    charK = []
    for m in range(3):
        span = (X - XI) / (mu + lp[m])
        xd = X - mu * span
        px = xd[:, None] + mu * span[:, None] * s
        pxi = xd[:, None] - lp[m] * span[:, None] * s
        sig_pp = [cp.entry(l, m, pxi) for l in range(3)]  # Sigma++_{l m}(xi)
        sig_mp = cp.entry(3, m, pxi)                      # Sigma-+_m(xi)
        charK.append((span, xd, px, pxi, sig_pp, sig_mp))
    # N characteristics: from (x - xi, 0) along (1, 1)
    nx = (X - XI)[:, None] + XI[:, None] * s
    nxi = XI[:, None] * s
    sig_pm = [cp.entry(l, 3, nxi) for l in range(3)]      # Sigma+-_l(xi)
    Q = mode.Q

    F = np.zeros((4, n + 1, n + 1))
    diag = diagonal_data(cp, xg)
    k_diag_at = [diagonal_data(cp, c[1])[m] for m, c in enumerate(charK)]

    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        new = np.zeros_like(F)
        for m in range(3):
            span, xd, px, pxi, sig_pp, sig_mp = charK[m]
            vals = _interp(F, n, L, px, pxi)
            rhs = vals[0] * sig_pp[0] + vals[1] * sig_pp[1] + vals[2] * sig_pp[2] \
                + vals[3] * sig_mp
            new[m, ii, jj] = k_diag_at[m] + span * (rhs @ wq)
            new[m, np.arange(n + 1), np.arange(n + 1)] = diag[m]
        # edge condition uses the fresh K on xi = 0
        base = (new[0, :, 0] * lp[0] * Q[0] + new[1, :, 0] * lp[1] * Q[1]
                + new[2, :, 0] * lp[2] * Q[2]) / mu
        Fb = new.copy()
        Fb[3, :, 0] = base
        vals = _interp(Fb, n, L, nx, nxi)
        integrand = (vals[0] * sig_pm[0] + vals[1] * sig_pm[1] + vals[2] * sig_pm[2]) / mu
        new[3, ii, jj] = _interp(Fb[3:4], n, L, X - XI, np.zeros_like(X))[0] \
            + XI * (integrand @ wq)
        scale = max(np.max(np.abs(new)), 1e-300)
        residual = np.max(np.abs(new - F)) / scale
        F = new
        if residual < tol or not np.any(F):
            residual = 0.0 if not np.any(F) else residual
            break
    converged = residual < tol
    log.debug("kernel solve n=%d: %d iterations, relative change %.3e", n, it, residual)
    if not converged and raise_on_failure:
        raise KernelError(f"kernel iteration did not converge in {max_iter} iterations "
                          f"(last relative change {residual:.3e})", residual)
    mask = np.triu(np.ones((n + 1, n + 1), dtype=bool), 1)
    F[:, mask] = 0.0
    return KernelGrid(n, L, F[:3].copy(), F[3].copy(), converged, it, float(residual))


@dataclass(frozen=True)
class KernelResidual:
    pde_K: float
    pde_N: float
    bc_diag: float
    bc_base: float


def kernel_residual(kernels: KernelGrid, mode: ModeLinearization,
                    couplings: Couplings | None = None) -> KernelResidual:
    """Sup-norms of the kernel relations evaluated by finite differences.

    Interior relations use central differences on nodes with 1 <= j < i < n.
    The edge condition at xi = 0 is checked with values extrapolated
    quadratically from xi = h, 2h, 3h, so it measures how well the interior
    solution matches the imposed data rather than the imposition itself.
    """
    cp = couplings if couplings is not None else Couplings.of(mode)
    n, h = kernels.n, kernels.h
    xg = np.linspace(0.0, kernels.L, n + 1)
    K, N = kernels.K, kernels.N
    mu, lp = cp.mu, cp.lam_plus

    i, j = np.tril_indices(n + 1, -1)
    sel = (j >= 1) & (i <= n - 1)
    i, j = i[sel], j[sel]
    xi = xg[j]
    res_K = 0.0
    for m in range(3):
        dx = (K[m, i + 1, j] - K[m, i - 1, j]) / (2 * h)
        dxi = (K[m, i, j + 1] - K[m, i, j - 1]) / (2 * h)
        r = mu * dx - lp[m] * dxi
        r -= sum(K[l, i, j] * cp.entry(l, m, xi) for l in range(3))
        r -= N[i, j] * cp.entry(3, m, xi)
        res_K = max(res_K, float(np.max(np.abs(r), initial=0.0)))
    dNx = (N[i + 1, j] - N[i - 1, j]) / (2 * h)
    dNxi = (N[i, j + 1] - N[i, j - 1]) / (2 * h)
    rN = mu * (dNx + dNxi) - sum(K[l, i, j] * cp.entry(l, 3, xi) for l in range(3))
    res_N = float(np.max(np.abs(rN), initial=0.0))

    d = np.arange(n + 1)
    diag = diagonal_data(cp, xg)
    bc_diag = float(np.max(np.abs((K[:, d, d] - diag) * (mu + lp)[:, None])))

    rows = np.arange(3, n + 1)
    def edge(F):
        return 3 * F[..., rows, 1] - 3 * F[..., rows, 2] + F[..., rows, 3]
    Ke, Ne = edge(K), edge(N)
    bc_base = float(np.max(np.abs(-mu * Ne + (lp * mode.Q) @ Ke), initial=0.0))
    return KernelResidual(res_K, res_N, bc_diag, bc_base)


def kernel_rows(kernels: KernelGrid):
    """Rows (x, xi, k1, k2, k3, n_kernel) over the triangle nodes."""
    n = kernels.n
    xg = np.linspace(0.0, kernels.L, n + 1)
    i, j = np.tril_indices(n + 1)
    return np.column_stack([xg[i], xg[j], kernels.K[0, i, j], kernels.K[1, i, j],
                            kernels.K[2, i, j], kernels.N[i, j]])


# ---------------------------------------------------------------------------
# grid operators on the cell-centred simulation grid


def cell_centers(L: float, n_cells: int) -> np.ndarray:
    h = L / n_cells
    return (np.arange(n_cells) + 0.5) * h


def _ext_weights(n_cells):
    """Quadrature nodes {0, x_0, ..., x_{n-1}, L} as linear maps of cell values.

    Returns E (n+2, n) mapping cell values to node values (end values by
    linear extrapolation) and the node positions as multiples of h.
    """
    E = np.zeros((n_cells + 2, n_cells))
    E[0, 0], E[0, 1] = 1.5, -0.5
    E[1:-1] = np.eye(n_cells)
    E[-1, -1], E[-1, -2] = 1.5, -0.5
    pos = np.concatenate([[0.0], np.arange(n_cells) + 0.5, [n_cells]])
    return E, pos


def backstepping_operator(kernels: KernelGrid, n_cells: int) -> np.ndarray:
    """Matrix G (n, 4, n) of the Volterra integral in the backstepping map.

    beta_k = w4_k - sum_{c,l} G[k, c, l] w_c[l]; the alpha channels are unchanged.
    Trapezoid rule on {0, x_0, ..., x_k}; the value at 0 is extrapolated.
    """
    L = kernels.L
    h = L / n_cells
    E, pos = _ext_weights(n_cells)
    G = np.zeros((n_cells, 4, n_cells))
    for k in range(n_cells):
        nodes = pos[: k + 2] * h  # 0, x_0..x_k
        dx = np.diff(nodes)
        w = np.zeros(k + 2)
        w[:-1] += 0.5 * dx
        w[1:] += 0.5 * dx
        kv = kernels.interp(np.full(k + 2, nodes[-1]), nodes)  # (4, k+2)
        G[k] = (kv * w) @ E[: k + 2]
    return G


def apply_backstepping(G: np.ndarray, w: np.ndarray) -> np.ndarray:
    """theta = K0 w for cellwise Riemann data ``w`` of shape (n, 4)."""
    out = w.copy()
    out[:, 3] -= np.einsum("kcl,lc->k", G, w)
    return out


@dataclass(frozen=True, eq=False)
class Controller:
    """Nominal full-state feedback U = u_scale * Ubar(w0), w0 = T0(x) z."""

    R0: np.ndarray
    K_L: np.ndarray
    N_L: np.ndarray
    u_scale: float
    nominal_mode: ModeLinearization
    x: np.ndarray
    gain: np.ndarray  # (n, 4): U = sum_k gain[k] @ z[k]

    @property
    def n_cells(self) -> int:
        return len(self.x)


def build_controller(nominal_mode: ModeLinearization, kernels: KernelGrid,
                     n_cells: int) -> Controller:
    L = nominal_mode.L
    if kernels.L != L:
        raise ValueError("kernel grid and mode disagree on road length")
    if nominal_mode.kappa[3] == 0:
        raise ValueError("kappa_4 vanishes; control input has no effect")
    x = cell_centers(L, n_cells)
    h = L / n_cells
    E, pos = _ext_weights(n_cells)
    nodes = pos * h
    kv = kernels.interp(np.full(nodes.shape, L), nodes)
    wt = np.full(nodes.shape, 0.0)
    dx = np.diff(nodes)
    wt[:-1] += 0.5 * dx
    wt[1:] += 0.5 * dx
    # Ubar = -R0 w+(L) + int K(L,.) w+ + N(L,.) w-
    g = (kv * wt) @ E  # (4, n)
    g[:3] -= np.outer(nominal_mode.R, E[-1])
    u_scale = 1.0 / nominal_mode.u_bar_gain
    T0, _ = nominal_mode.riemann_transform(x)
    gain = u_scale * np.einsum("ck,kcj->kj", g, T0)
    K_L = kernels.interp(np.full(x.shape, L), x)
    return Controller(nominal_mode.R.copy(), K_L[:3].T.copy(), K_L[3].copy(), u_scale,
                      nominal_mode, x, gain)


def control_input(controller: Controller, z: np.ndarray, t: float = 0.0) -> float:
    """Physical boundary flux perturbation U(t) (veh/s) for cellwise state z (n, 4)."""
    z = np.asarray(z)
    if z.shape != (controller.n_cells, 4):
        raise ValueError(f"state shape {z.shape} does not match controller grid "
                         f"({controller.n_cells}, 4)")
    return float(np.einsum("kj,kj->", controller.gain, z))
