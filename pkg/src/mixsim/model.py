"""Two-class ARZ model: equilibria, linearization and Riemann coordinates.

A :class:`ModeLinearization` bundles everything that depends on one value of
the AV spacing ``s2``.  Riemann variables are ordered ``w = (w1, w2, w3, w4)``
with transport speeds ``(lambda2, lambda3, lambda1, lambda4)``; the first three
travel downstream and ``w4`` travels upstream.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .params import TrafficParams

# Row i of the Riemann transform takes eigen-coordinate PERM[i] (0-based):
# w1 <- lambda2, w2 <- lambda3, w3 <- lambda1, w4 <- lambda4.
PERM = (1, 2, 0, 3)


class ModelError(ValueError):
    """The model is not valid (hyperbolicity or boundary maps fail) at this mode."""


class DegeneracyError(ModelError):
    pass


class Regime(enum.Enum):
    FREE_FLOW = "FreeFlow"
    CONGESTED = "Congested"
    INVALID = "Invalid"


def area_occupancy(rho1, rho2, a1, a2, W):
    if np.any(np.asarray(rho1) < 0) or np.any(np.asarray(rho2) < 0):
        raise ValueError("densities must be non-negative")
    if W <= 0:
        raise ValueError("road width must be positive")
    return (a1 * rho1 + a2 * rho2) / W


def equilibrium_speed(cls: int, AO, params: TrafficParams):
    """Greenshields-type equilibrium speed of class 1 (HV) or 2 (AV).

    Not clamped: occupancy above the class maximum gives a negative speed,
    which the regime classification then reports as invalid.
    """
    if cls == 1:
        V, AObar, gamma = params.V1, params.AObar1, params.gamma1
    elif cls == 2:
        V, AObar, gamma = params.V2, params.AObar2, params.gamma2
    else:
        raise ValueError(f"vehicle class must be 1 or 2, got {cls}")
    return V * (1.0 - (AO / AObar) ** gamma)


@dataclass(frozen=True)
class Equilibrium:
    a2: float
    AO: float
    v1_star: float
    v2_star: float
    q1_star: float
    q2_star: float


def equilibrium(params: TrafficParams, s2: float) -> Equilibrium:
    if s2 <= 0:
        raise ValueError("AV spacing must be positive")
    a2 = params.impact_area(s2)
    AO = area_occupancy(params.rho1_star, params.rho2_star, params.a1, a2, params.W)
    v1 = equilibrium_speed(1, AO, params)
    v2 = equilibrium_speed(2, AO, params)
    return Equilibrium(a2, AO, v1, v2, v1 * params.rho1_star, v2 * params.rho2_star)


def beta_coefficients(params: TrafficParams, s2: float) -> np.ndarray:
    """beta[m, n] = -d V_e,m / d rho_n at the equilibrium densities."""
    a = (params.a1, params.impact_area(s2))
    AO = area_occupancy(params.rho1_star, params.rho2_star, a[0], a[1], params.W)
    beta = np.empty((2, 2))
    for m, (V, AObar, gamma) in enumerate(
            [(params.V1, params.AObar1, params.gamma1),
             (params.V2, params.AObar2, params.gamma2)]):
        slope = V * gamma * (AO / AObar) ** (gamma - 1.0) / (params.W * AObar)
        beta[m] = slope * np.asarray(a)
    return beta


def assemble_jacobians(v1, v2, rho1, rho2, beta, iota1, iota2):
    """Transport matrix J_lambda and source matrix J of z_t + J_lambda z_x = J z."""
    b11, b12 = beta[0]
    b21, b22 = beta[1]
    Jlambda = np.array([
        [v1, rho1, 0.0, 0.0],
        [0.0, v1 - b11 * rho1, b12 * (v1 - v2), -b12 * rho2],
        [0.0, 0.0, v2, rho2],
        [b21 * (v2 - v1), -b21 * rho1, 0.0, v2 - b22 * rho2],
    ])
    Jsource = np.array([
        [0.0, 0.0, 0.0, 0.0],
        [-b11 / iota1, -1.0 / iota1, -b12 / iota1, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [-b21 / iota2, 0.0, -b22 / iota2, -1.0 / iota2],
    ])
    return Jlambda, Jsource


def characteristic_speeds(v1, v2, rho1, rho2, beta):
    """Closed-form eigenvalues (v1, v2, lambda3, lambda4) and the discriminant."""
    cal1, cal2 = beta[0, 0], beta[1, 1]
    arg = (cal2 * rho2 - cal1 * rho1 + v1 - v2) ** 2 + 4.0 * beta[0, 1] * beta[1, 0] * rho1 * rho2
    if arg < 0:
        raise ModelError(f"negative discriminant {arg}: system not hyperbolic")
    Delta = np.sqrt(arg)
    base = v1 + v2 - cal1 * rho1 - cal2 * rho2
    lam = np.array([v1, v2, 0.5 * (base + Delta), 0.5 * (base - Delta)])
    return lam, Delta


def classify_regime(lam) -> Regime:
    l1, l2, l3, l4 = lam
    if l1 > 0 and l2 > 0 and l3 > 0:
        if l4 < 0:
            return Regime.CONGESTED
        if l4 > 0:
            return Regime.FREE_FLOW
    return Regime.INVALID


def diagonalize(Jlambda, Jsource, lam, rel_gap: float = 1e-9):
    """Eigenvector basis V (columns ordered like ``lam``) and V^-1 Jsource V.

    Each column is scaled so that its largest-magnitude entry is +1.
    """
    lam = np.asarray(lam, dtype=float)
    scale = np.max(np.abs(lam))
    for i in range(4):
        for j in range(i + 1, 4):
            if abs(lam[i] - lam[j]) < rel_gap * scale:
                raise DegeneracyError(
                    f"eigenvalues {lam[i]:.6g} and {lam[j]:.6g} are (nearly) equal")
    V = np.empty((4, 4))
    for k, lk in enumerate(lam):
        # null vector of (J - lk I): right singular vector of the smallest singular value
        _, _, vh = np.linalg.svd(Jlambda - lk * np.eye(4))
        v = vh[-1]
        v = v / v[np.argmax(np.abs(v))]
        V[:, k] = v
    Jhat = np.linalg.solve(V, Jsource @ V)
    return V, Jhat


@dataclass(frozen=True, eq=False)
class ModeLinearization:
    params: TrafficParams
    s2: float
    a2: float
    v1_star: float
    v2_star: float
    q1_star: float
    q2_star: float
    beta: np.ndarray
    Jlambda: np.ndarray
    Jsource: np.ndarray
    lam: np.ndarray
    Delta: float
    Vbasis: np.ndarray
    Vinv: np.ndarray
    Jhat: np.ndarray
    kappa: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    regime: Regime

    @property
    def L(self) -> float:
        return self.params.L

    @property
    def speeds(self) -> np.ndarray:
        """Transport speeds of (w1, w2, w3, w4): (lambda2, lambda3, lambda1, lambda4)."""
        return self.lam[list(PERM)]

    @property
    def lam_plus(self) -> np.ndarray:
        return self.speeds[:3]

    @property
    def lam_minus(self) -> float:
        """Upstream speed magnitude, -lambda4 (> 0 when congested)."""
        return -self.lam[3]

    @property
    def decay(self) -> np.ndarray:
        """Exponents Jhat_pp / lambda_p for each Riemann row, in w order."""
        d = np.diag(self.Jhat) / self.lam
        return d[list(PERM)]

    @property
    def u_bar_gain(self) -> float:
        """Factor mapping physical U to the Riemann boundary input Ubar."""
        return np.exp(-self.Jhat[3, 3] / self.lam[3] * self.L) / self.kappa[3]

    def riemann_transform(self, x):
        """T(x) and T(x)^-1 for scalar or array ``x`` (shape (..., 4, 4))."""
        x = np.asarray(x, dtype=float)
        e = np.exp(-np.multiply.outer(x, self.decay))
        PV = self.Vinv[list(PERM)]
        T = e[..., :, None] * PV
        Tinv = self.Vbasis[:, list(PERM)] / e[..., None, :]
        return T, Tinv

    def theta(self, x):
        """In-domain coupling matrix of the Riemann system, shape (..., 4, 4)."""
        x = np.asarray(x, dtype=float)
        p = list(PERM)
        Jp = self.Jhat[np.ix_(p, p)]
        c = self.decay
        ex = np.exp(np.multiply.outer(x, c))
        th = Jp * ex[..., None, :] / ex[..., :, None]
        idx = np.arange(4)
        th[..., idx, idx] = 0.0
        return th


def boundary_maps(V, Jhat, lam, v1, v2, rho1, rho2, L):
    """Boundary maps Q (3,), kappa (4,) and R (3,) of the Riemann system.

    w+(0) = Q w-(0) encodes the three inflow conditions and
    w-(L) = R w+(L) + Ubar the outflow flux condition.
    """
    kappa = np.array([v1, rho1, v2, rho2]) @ V
    # inflow rows: rho1~ = 0, rho2~ = 0 and total flux perturbation = 0
    A = np.vstack([V[0, :3], V[2, :3], kappa[:3]])
    b = np.array([V[0, 3], V[2, 3], kappa[3]])
    if abs(np.linalg.det(A)) < 1e-12 * np.max(np.abs(A)) ** 3:
        raise ModelError("inflow boundary block is singular")
    if abs(kappa[3]) < 1e-12 * np.max(np.abs(kappa)):
        raise ModelError("kappa_4 vanishes: the control does not reach w4")
    y = -np.linalg.solve(A, b)
    Q = y[[1, 2, 0]]
    c = np.diag(Jhat) / lam
    R = -np.array([kappa[p] / kappa[3] * np.exp((c[p] - c[3]) * L) for p in PERM[:3]])
    return Q, kappa, R


def linearize(params: TrafficParams, s2: float, require_congested: bool = True) -> ModeLinearization:
    """Build the full per-mode linearization for AV spacing ``s2``."""
    eq = equilibrium(params, s2)
    beta = beta_coefficients(params, s2)
    rho1, rho2 = params.rho1_star, params.rho2_star
    Jl, Js = assemble_jacobians(eq.v1_star, eq.v2_star, rho1, rho2, beta,
                                params.iota1, params.iota2)
    lam, Delta = characteristic_speeds(eq.v1_star, eq.v2_star, rho1, rho2, beta)
    regime = classify_regime(lam)
    if require_congested and regime is not Regime.CONGESTED:
        raise ModelError(f"mode s2={s2} is {regime.value}, congested regime required")
    V, Jhat = diagonalize(Jl, Js, lam)
    Q, kappa, R = boundary_maps(V, Jhat, lam, eq.v1_star, eq.v2_star, rho1, rho2, params.L)
    return ModeLinearization(
        params=params, s2=s2, a2=eq.a2, v1_star=eq.v1_star, v2_star=eq.v2_star,
        q1_star=eq.q1_star, q2_star=eq.q2_star, beta=beta, Jlambda=Jl, Jsource=Js,
        lam=lam, Delta=Delta, Vbasis=V, Vinv=np.linalg.inv(V), Jhat=Jhat,
        kappa=kappa, Q=Q, R=R, regime=regime)


def sigma_matrices(mode: ModeLinearization, x: float):
    """Coupling blocks (Sigma++, Sigma+-, Sigma-+) at position ``x``.

    Computed from the change of variables
    M(x) = T Jsource T^-1 - T Jlambda (T^-1)'(x); the diagonal of M vanishes.
    """
    M = coupling_from_transform(mode, x)
    np.fill_diagonal(M, 0.0)
    return M[:3, :3], M[:3, 3], M[3, :3]


def coupling_from_transform(mode: ModeLinearization, x: float) -> np.ndarray:
    T, Tinv = mode.riemann_transform(float(x))
    dTinv = Tinv * mode.decay[None, :]
    return T @ mode.Jsource @ Tinv - T @ mode.Jlambda @ dTinv


def transform_bounds(mode: ModeLinearization, x) -> tuple[float, float]:
    """Bounds m, M with m |z|^2 <= |T(x) z|^2 <= M |z|^2 over the sample points."""
    T, _ = mode.riemann_transform(np.asarray(x, dtype=float))
    s = np.linalg.svd(T, compute_uv=False)
    return float(np.min(s[..., -1]) ** 2), float(np.max(s[..., 0]) ** 2)
