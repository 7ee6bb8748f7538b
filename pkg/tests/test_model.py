import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixsim.model import (PERM, DegeneracyError, ModelError, Regime, area_occupancy,
                          assemble_jacobians, beta_coefficients, boundary_maps,
                          characteristic_speeds, classify_regime, coupling_from_transform,
                          diagonalize, equilibrium, equilibrium_speed, linearize,
                          sigma_matrices, transform_bounds)

KMH = 3.6


# --- occupancy and fundamental diagram --------------------------------------

def test_area_occupancy_examples():
    assert area_occupancy(0.15, 0.075, 10, 40, 6) == pytest.approx(0.75)
    assert area_occupancy(0, 0, 10, 40, 6) == 0
    assert area_occupancy(0.15, 0, 10, 40, 6) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        area_occupancy(-0.1, 0, 10, 40, 6)


def test_equilibrium_speed_limits(params):
    assert equilibrium_speed(2, params.AObar2, params) == pytest.approx(0.0, abs=1e-14)
    assert equilibrium_speed(2, 0.0, params) == params.V2
    assert equilibrium_speed(1, 0.75, params) * KMH == pytest.approx(29.16, rel=0.015)
    # above the jam occupancy the speed goes negative instead of being clamped
    assert equilibrium_speed(2, 0.95, params) < 0


def test_equilibrium_nominal(params):
    eq = equilibrium(params, 20.0)
    assert eq.v2_star * KMH == pytest.approx(13.32, rel=0.015)
    assert eq.q1_star == pytest.approx(eq.v1_star * params.rho1_star)


def test_equilibrium_empty_road(params):
    eq = equilibrium(params.with_densities(0.0, 0.0), 20.0)
    assert (eq.v1_star, eq.v2_star) == (params.V1, params.V2)
    assert eq.q1_star == eq.q2_star == 0


def test_equilibrium_at_jam_occupancy(params):
    # solve (a1 rho1 + a2 rho2) / W = AObar2 for a2, then s2 = a2/d - l
    a2 = (params.AObar2 * params.W - params.a1 * params.rho1_star) / params.rho2_star
    s2 = a2 / params.d - params.l
    eq = equilibrium(params, s2)
    assert eq.v2_star == pytest.approx(0.0, abs=1e-12)
    assert eq.q2_star == pytest.approx(0.0, abs=1e-12)


# --- beta -------------------------------------------------------------------

def _fd_beta(params, s2, h=1e-6):
    a = (params.a1, params.impact_area(s2))
    out = np.empty((2, 2))
    for n in range(2):
        for m in range(2):
            def v(r):
                rho = [params.rho1_star, params.rho2_star]
                rho[n] += r
                AO = area_occupancy(rho[0], rho[1], a[0], a[1], params.W)
                return equilibrium_speed(m + 1, AO, params)
            out[m, n] = -(v(h) - v(-h)) / (2 * h)
    return out


@pytest.mark.parametrize("s2", [18.0, 20.0, 22.0])
def test_beta_matches_finite_differences(params, s2):
    np.testing.assert_allclose(beta_coefficients(params, s2), _fd_beta(params, s2), rtol=1e-6)


def test_beta_ratio_single_class(params):
    p = params.with_densities(0.15, 0.0)
    b = beta_coefficients(p, 20.0)
    assert b[0, 1] / b[0, 0] == pytest.approx(p.impact_area(20.0) / p.a1, rel=1e-14)


def test_beta_scales_with_width(params):
    from dataclasses import replace
    # doubling W at doubled densities keeps AO fixed and halves every entry
    p2 = replace(params, W=2 * params.W).with_densities(2 * params.rho1_star,
                                                        2 * params.rho2_star)
    np.testing.assert_allclose(beta_coefficients(p2, 20.0),
                               0.5 * beta_coefficients(params, 20.0), rtol=1e-13)


@settings(max_examples=40, deadline=None)
@given(rho1=st.floats(0.02, 0.2), rho2=st.floats(0.01, 0.09), s2=st.floats(10.0, 24.0))
def test_beta_fd_property(params, rho1, rho2, s2):
    p = params.with_densities(rho1, rho2)
    np.testing.assert_allclose(beta_coefficients(p, s2), _fd_beta(p, s2), rtol=1e-5, atol=1e-9)


# --- Jacobians and speeds ---------------------------------------------------

def test_jacobian_structure(nominal):
    Js = nominal.Jsource
    assert not Js[0].any() and not Js[2].any()
    assert np.all(Js @ np.zeros(4) == 0)
    ev = np.linalg.eigvals(nominal.Jlambda)
    for v in (nominal.v1_star, nominal.v2_star):
        assert np.min(np.abs(ev - v)) < 1e-9 * abs(v)
    assert np.trace(nominal.Jlambda) == pytest.approx(nominal.lam.sum(), rel=1e-9)


def test_closed_form_speeds_match_eigensolver(all_modes):
    for m in all_modes:
        ev = np.sort(np.linalg.eigvals(m.Jlambda).real)
        np.testing.assert_allclose(np.sort(m.lam), ev, rtol=1e-8)


def test_decoupled_speeds():
    beta = np.array([[0.5, 0.0], [0.0, 0.8]])
    lam, _ = characteristic_speeds(8.0, 4.0, 0.1, 0.05, beta)
    assert sorted(lam[2:]) == pytest.approx(sorted([8.0 - 0.05, 4.0 - 0.04]))


def test_negative_discriminant_rejected():
    beta = np.array([[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(ModelError):
        characteristic_speeds(1.0, 1.0, 1.0, 1.0, beta)


def test_eigen_ordering_all_modes(all_modes):
    for m in all_modes:
        l1, l2, l3, l4 = m.lam
        assert l4 <= min(l1, l2) <= l3 <= max(l1, l2)


@pytest.mark.parametrize("lam,reg", [((1, 2, 1.5, -0.5), Regime.CONGESTED),
                                     ((1, 2, 1.5, 0.5), Regime.FREE_FLOW),
                                     ((1, 2, 1.5, 0.0), Regime.INVALID),
                                     ((1, 2, -1.5, -0.5), Regime.INVALID)])
def test_classify(lam, reg):
    assert classify_regime(lam) is reg


def test_all_paper_modes_congested(all_modes):
    assert all(m.regime is Regime.CONGESTED for m in all_modes)


def test_free_flow_rejected_when_congestion_required(params):
    with pytest.raises(ModelError):
        linearize(params.with_densities(0.01, 0.005), 20.0)
    m = linearize(params.with_densities(0.01, 0.005), 20.0, require_congested=False)
    assert m.regime is Regime.FREE_FLOW


# --- diagonalization --------------------------------------------------------

def test_diagonalization(nominal):
    V, lam = nominal.Vbasis, nominal.lam
    D = np.linalg.solve(V, nominal.Jlambda @ V)
    off = D - np.diag(np.diag(D))
    assert np.max(np.abs(off)) < 1e-9 * np.max(np.abs(lam))
    np.testing.assert_allclose(np.diag(D), lam, rtol=1e-9)
    # normalisation: largest entry of each column is exactly +1
    for k in range(4):
        col = V[:, k]
        assert col[np.argmax(np.abs(col))] == 1.0


def test_diagonalize_scale_invariance(nominal):
    V1, _ = diagonalize(nominal.Jlambda, nominal.Jsource, nominal.lam)
    V2, _ = diagonalize(2 * nominal.Jlambda, nominal.Jsource, 2 * nominal.lam)
    np.testing.assert_allclose(V1, V2, atol=1e-10)


def test_jhat_similarity_oracle(nominal):
    # independent eigenvectors from numpy.linalg.eig, rescaled the same way
    w, vecs = np.linalg.eig(nominal.Jlambda)
    order = [int(np.argmin(np.abs(w - l))) for l in nominal.lam]
    V = vecs[:, order].real
    V = V / V[np.argmax(np.abs(V), axis=0), np.arange(4)]
    Jh = np.linalg.inv(V) @ nominal.Jsource @ V
    np.testing.assert_allclose(np.diag(nominal.Jhat), np.diag(Jh), rtol=1e-8, atol=1e-14)


def test_degenerate_eigenvalues_rejected():
    J = np.diag([1.0, 1.0, 2.0, -1.0])
    with pytest.raises(DegeneracyError):
        diagonalize(J, np.zeros((4, 4)), np.array([1.0, 1.0, 2.0, -1.0]))


# --- Riemann transform ------------------------------------------------------

def test_transform_at_zero(nominal):
    T, _ = nominal.riemann_transform(0.0)
    np.testing.assert_allclose(T, nominal.Vinv[list(PERM)], rtol=1e-14)


def test_transform_inverse(nominal, rng):
    xs = rng.uniform(0, nominal.L, 10)
    T, Tinv = nominal.riemann_transform(xs)
    for a, b in zip(T, Tinv):
        np.testing.assert_allclose(a @ b, np.eye(4), atol=1e-9)
    z = rng.normal(size=4)
    np.testing.assert_allclose(Tinv[3] @ (T[3] @ z), z, rtol=1e-9, atol=1e-12)


def test_transform_diagonalises_transport(all_modes):
    for m in all_modes:
        for x in np.linspace(0, m.L, 7):
            T, Tinv = m.riemann_transform(x)
            D = T @ m.Jlambda @ Tinv
            np.testing.assert_allclose(D, np.diag(m.speeds),
                                       atol=1e-8 * np.max(np.abs(m.speeds)))


def test_norm_equivalence_bounds(all_modes):
    for m in all_modes:
        lo, hi = transform_bounds(m, np.linspace(0, m.L, 101))
        assert 0 < lo <= hi < np.inf


# --- in-domain coupling -----------------------------------------------------

def test_coupling_diagonal_vanishes(nominal):
    for x in np.linspace(0, nominal.L, 20):
        M = coupling_from_transform(nominal, x)
        assert np.max(np.abs(np.diag(M))) < 1e-8 * np.linalg.norm(M)


def test_coupling_finite_difference_oracle(nominal):
    h = 1e-6 * nominal.L
    for x in (0.1 * nominal.L, 0.5 * nominal.L, 0.9 * nominal.L):
        T, _ = nominal.riemann_transform(x)
        _, Tp = nominal.riemann_transform(x + h)
        _, Tm = nominal.riemann_transform(x - h)
        _, Ti = nominal.riemann_transform(x)
        M_fd = T @ nominal.Jsource @ Ti - T @ nominal.Jlambda @ ((Tp - Tm) / (2 * h))
        M = coupling_from_transform(nominal, x)
        assert np.max(np.abs(M - M_fd)) < 1e-5 * np.max(np.abs(M))


def test_theta_is_offdiagonal_coupling(nominal):
    for x in np.linspace(0, nominal.L, 5):
        M = coupling_from_transform(nominal, x)
        np.fill_diagonal(M, 0.0)
        np.testing.assert_allclose(nominal.theta(x), M, atol=1e-10 * np.max(np.abs(M)))


def test_sigma_blocks_zero_without_source(nominal):
    from dataclasses import replace
    m = replace(nominal, Jsource=np.zeros((4, 4)), Jhat=np.zeros((4, 4)))
    spp, spm, smp = sigma_matrices(m, 300.0)
    assert not spp.any() and not spm.any() and not smp.any()


# --- boundary maps ----------------------------------------------------------

def _left_conditions(m, z):
    """rho1~, rho2~ and the total flux perturbation at the inflow."""
    return np.array([z[0], z[2], m.v1_star * z[0] + m.params.rho1_star * z[1]
                     + m.v2_star * z[2] + m.params.rho2_star * z[3]])


def _flux(m, z):
    return (m.v1_star * z[0] + m.params.rho1_star * z[1]
            + m.v2_star * z[2] + m.params.rho2_star * z[3])


@pytest.mark.parametrize("s2", [18.0, 20.0, 22.0])
def test_left_bc_substitution(params, rng, s2):
    m = linearize(params, s2)
    _, Tinv = m.riemann_transform(0.0)
    for b0 in rng.normal(size=5):
        w = np.concatenate([m.Q * b0, [b0]])
        assert np.max(np.abs(_left_conditions(m, Tinv @ w))) < 1e-8 * max(1, abs(b0))


@pytest.mark.parametrize("s2", [18.0, 20.0, 22.0])
def test_right_bc_substitution(params, rng, s2):
    m = linearize(params, s2)
    _, Tinv = m.riemann_transform(m.L)
    for _ in range(5):
        wp = rng.normal(size=3)
        z = Tinv @ np.concatenate([wp, [m.R @ wp]])
        assert abs(_flux(m, z)) < 1e-8 * np.max(np.abs(z))
        # with a control input the outflow flux equals U
        U = rng.normal()
        z = Tinv @ np.concatenate([wp, [m.R @ wp + U * m.u_bar_gain]])
        assert _flux(m, z) == pytest.approx(U, abs=1e-8 * max(1.0, np.max(np.abs(z))))


def test_kappa_finite(nominal):
    assert np.all(np.isfinite(nominal.kappa)) and nominal.kappa[3] != 0


def test_boundary_maps_reject_singular_block(nominal):
    V = np.eye(4)
    with pytest.raises(ModelError):
        boundary_maps(V, np.zeros((4, 4)), nominal.lam, 0.0, 0.0, 0.0, 0.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(s2=st.floats(16.0, 23.0))
def test_bc_and_transport_properties(params, s2):
    m = linearize(params, s2, require_congested=False)
    if m.regime is not Regime.CONGESTED:
        return
    T, Tinv = m.riemann_transform(0.3 * m.L)
    np.testing.assert_allclose(T @ m.Jlambda @ Tinv, np.diag(m.speeds),
                               atol=1e-8 * np.max(np.abs(m.speeds)))
    _, T0inv = m.riemann_transform(0.0)
    assert np.max(np.abs(_left_conditions(m, T0inv @ np.append(m.Q, 1.0)))) < 1e-8
