import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixsim.markov import (ChainSpec, ConstantRates, ModePath, PaperRateTable, chain_from_config,
                           kolmogorov_forward, mode_at, occupancy, sample_path, single_mode_chain)
from mixsim.params import ConfigError, SpacingModeSet

TWO = SpacingModeSet((19.0, 21.0), 20.0, 19.0, 21.0)


def two_state(a, b, p0=(1.0, 0.0)):
    return ChainSpec(TWO, ConstantRates([[0, a], [b, 0]]), max(a, b), np.array(p0))


def test_rate_table_examples():
    tab = PaperRateTable(10.0, 0.001)
    R = tab(0.0)
    assert np.all(np.diag(R) == 0)
    assert R[0, 1] == 20.0            # endpoint row
    assert R[1, 2] == pytest.approx(30.0)   # interior pair at t = 0
    assert R[1, 0] == pytest.approx(1.0)    # interior to endpoint
    assert tab.tau_star == 30.0


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.0, 1e4))
def test_rate_table_bounds(t):
    tab = PaperRateTable(10.0, 0.001)
    R = tab(t)
    assert np.all(np.diag(R) == 0)
    assert np.all((R >= 0) & (R <= tab.tau_star + 1e-12))


def test_column_rates_match_table(rng):
    tab = PaperRateTable(10.0, 0.001)
    t = rng.uniform(0, 400, 50)
    j = rng.integers(0, 5, 50)
    full = tab(t)
    np.testing.assert_allclose(tab.into(t, j), full[np.arange(50), :, j], rtol=1e-15)


def test_kolmogorov_identity_at_start(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    pt = kolmogorov_forward(chain, 1.0, 0.001)
    np.testing.assert_array_equal(pt.P[0], np.eye(5))


@pytest.mark.parametrize("a,b", [(0.3, 0.7), (2.0, 0.5)])
def test_two_state_closed_form(a, b):
    pt = kolmogorov_forward(two_state(a, b), 10.0, 0.01)
    t = pt.t_grid
    exact = b / (a + b) + a / (a + b) * np.exp(-(a + b) * t)
    np.testing.assert_allclose(pt.P[:, 0, 0], exact, atol=1e-6)


def test_row_sums_and_range(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    pt = kolmogorov_forward(chain, 20.0, 0.1 / chain.tau_star)
    assert np.max(np.abs(pt.P.sum(axis=2) - 1)) < 1e-8
    assert pt.P.min() > -1e-10 and pt.P.max() < 1 + 1e-10


def test_dt_limit(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    with pytest.raises(ConfigError):
        kolmogorov_forward(chain, 1.0, 0.01)


def test_initial_distribution_checked():
    with pytest.raises(ConfigError):
        ChainSpec(TWO, ConstantRates([[0, 1], [1, 0]]), 1.0, np.array([0.6, 0.6]))
    with pytest.raises(ConfigError):
        ChainSpec(TWO, ConstantRates([[0, 1], [1, 0]]), 1.0, np.array([1.0]))


def test_zero_rates_single_segment():
    chain = single_mode_chain(TWO, 1)
    p = sample_path(chain, 3, 100.0)
    assert p.n_jumps == 0 and p.mode_indices == (1,)


def test_sampling_deterministic(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    a, b = sample_path(chain, 7, 50.0), sample_path(chain, 7, 50.0)
    assert a == b
    assert sample_path(chain, 8, 50.0) != a


def test_jump_count_bounded(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    n = np.mean([sample_path(chain, s, 20.0).n_jumps for s in range(20)])
    assert n <= chain.tau_star * chain.r * 20.0


def test_paths_are_true_jumps(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    p = sample_path(chain, 1, 30.0)
    assert all(a != b for a, b in zip(p.mode_indices, p.mode_indices[1:]))
    assert np.all(np.diff(p.jump_times) > 0)


def test_two_state_sampler_matches_ode():
    # time-invariant two-state chain: occupancy against the closed form
    a, b, T = 0.4, 0.9, 3.0
    chain = two_state(a, b)
    paths = [sample_path(chain, s, T) for s in range(4000)]
    p1 = b / (a + b) + a / (a + b) * np.exp(-(a + b) * T)
    occ = occupancy(paths, T, 2)[0]
    se = np.sqrt(p1 * (1 - p1) / 4000)
    assert abs(occ - p1) < 3 * se


def test_mode_at_right_continuous():
    p = ModePath((0.0, 1.0, 2.5), (0, 1, 0), 5.0)
    assert mode_at(p, 0.0) == 0
    assert mode_at(p, 1.0) == 1
    assert mode_at(p, 2.0) == 1
    assert mode_at(p, 2.5) == 0
    assert mode_at(p, 5.0) == 0
    with pytest.raises(ValueError):
        mode_at(p, 5.1)
    with pytest.raises(ValueError):
        mode_at(p, -0.1)


def test_mode_path_validation():
    with pytest.raises(ValueError):
        ModePath((0.0, 1.0, 1.0), (0, 1, 0), 5.0)
    with pytest.raises(ValueError):
        ModePath((0.5,), (0,), 5.0)


def test_generator_rows_sum_to_zero(cfg):
    chain = chain_from_config(cfg.modes, cfg.section("markov"))
    G = chain.generator(np.linspace(0, 100, 7))
    np.testing.assert_allclose(G.sum(axis=-1), 0.0, atol=1e-12)
