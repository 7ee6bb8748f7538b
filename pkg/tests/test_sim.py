import types

import numpy as np
import pytest

from mixsim.markov import ModePath
from mixsim.model import ModelError, linearize
from mixsim.params import ConfigError
from mixsim.sim import (CFLError, InitialCondition, ModeGrid, Simulator, StateProfile,
                        initial_condition, l2_norm, scenario_from_config, step, step_riemann)


@pytest.fixture(scope="module")
def scenario(cfg):
    return scenario_from_config(cfg)


@pytest.fixture(scope="module")
def closed_sim(scenario):
    return Simulator(scenario)


def nominal_path(sc, horizon=None):
    return ModePath.constant(sc.nominal_index, sc.horizon if horizon is None else horizon)


# --- initial condition ------------------------------------------------------

def test_zero_amplitude(scenario):
    sc = scenario.with_(ic=InitialCondition((0.0,) * 4))
    assert not initial_condition(sc).z.any()


def test_default_profile(scenario, nominal):
    z0 = initial_condition(scenario)
    x = z0.x
    np.testing.assert_allclose(z0.z[:, 0], 0.1 * scenario.params.rho1_star * np.sin(2 * np.pi * x / 1000.0),
                               rtol=1e-14)
    np.testing.assert_allclose(z0.z[:, 3].max(), 0.1 * nominal.v2_star, rtol=1e-3)
    # whole periods integrate to zero
    assert np.all(np.abs(z0.z.sum(axis=0) * z0.dx) < 1e-10 * np.abs(z0.z).max() * 1000)


def test_amplitude_guard():
    with pytest.raises(ConfigError):
        InitialCondition((0.6, 0.1, 0.1, 0.1))


@pytest.mark.parametrize("kw", [dict(cfl=1.2), dict(horizon=-1.0), dict(n_cells=16),
                                dict(loop="half"), dict(snapshot_every=0.0)])
def test_scenario_validation(scenario, kw):
    with pytest.raises(ConfigError):
        scenario.with_(**kw)


# --- single steps -----------------------------------------------------------

def test_equilibrium_is_fixed_point(closed_sim):
    z = StateProfile(closed_sim.x, np.zeros((100, 4)))
    for g in closed_sim.grids:
        for ctrl in (None, closed_sim.controller):
            out, U = step(z, g, ctrl, 0.0, closed_sim.dt)
            assert U == 0 and not out.z.any()


def test_cfl_violation(closed_sim):
    z = StateProfile(closed_sim.x, np.zeros((100, 4)))
    g = closed_sim.grids[0]
    limit = closed_sim.dx / np.max(np.abs(g.speeds))
    with pytest.raises(CFLError):
        step(z, g, None, 0.0, 1.01 * limit)


def test_non_congested_active_mode(params, closed_sim):
    m = linearize(params.with_densities(0.01, 0.005), 20.0, require_congested=False)
    g = ModeGrid(m, closed_sim.x)
    z = StateProfile(closed_sim.x, np.zeros((100, 4)))
    with pytest.raises(ModelError):
        step(z, g, None, 0.0, 1e-3)


def test_pure_advection_of_a_step():
    n, dx, lam4 = 200, 1.0, -2.0
    g = types.SimpleNamespace(speeds=np.array([1.0, 1.5, 0.5, lam4]),
                              theta=np.zeros((n, 4, 4)), Q=np.zeros(3), R=np.zeros(3))
    w = np.zeros((n, 4))
    w[120:, 3] = 1.0
    dt = 0.4
    k = 100
    for _ in range(k):
        w = step_riemann(w, g, 0.0, dt, dx)
    # the jump moves left by |lam4| t; zeros enter through x = L behind it
    x = np.arange(n) + 0.5
    shift = abs(lam4) * k * dt
    lead = x[:n // 2][np.argmin(np.abs(w[:n // 2, 3] - 0.5))]
    trail = x[n // 2:][np.argmin(np.abs(w[n // 2:, 3] - 0.5))]
    assert abs(lead - (120 - shift)) < 2.0
    assert abs(trail - (n - shift)) < 2.0
    assert w[:, 3].min() >= -1e-12 and w[:, 3].max() <= 1 + 1e-12   # monotone scheme
    assert not w[:, :3].any()


# --- runs -------------------------------------------------------------------

def test_horizon_zero(scenario):
    tr = Simulator(scenario.with_(horizon=0.0, loop="open", path=None)).run()
    assert len(tr.t) == 1 and len(tr.snapshots) == 1


def test_nominal_open_loop_persists(scenario):
    tr = Simulator(scenario.with_(loop="open", path=nominal_path(scenario))).run()
    assert tr.l2[-1] >= 0.5 * tr.l2[0]


def test_nominal_closed_loop_decays(closed_sim, scenario):
    tr = closed_sim.run(path=nominal_path(scenario))
    assert tr.l2[-1] < 0.05 * tr.l2[0]
    assert tr.t[-1] == scenario.horizon
    assert np.all(tr.l2 >= 0)


def test_grid_convergence(closed_sim, scenario):
    a = closed_sim.run(path=nominal_path(scenario))
    b = Simulator(scenario.with_(n_cells=200)).run(path=nominal_path(scenario))
    diff = np.max(np.abs(a.l2 - np.interp(a.t, b.t, b.l2))) / np.max(a.l2)
    assert diff < 0.10


def test_frozen_modes_open_loop_bounded(scenario):
    for i in range(scenario.modes.r):
        tr = Simulator(scenario.with_(loop="open", path=ModePath.constant(i, scenario.horizon))).run()
        assert tr.l2.max() < 10 * tr.l2[0]


def test_stochastic_closed_below_open(scenario, closed_sim):
    open_sim = Simulator(scenario.with_(loop="open"))
    for seed in (0, 5):
        c, o = closed_sim.run(seed=seed), open_sim.run(seed=seed)
        late = c.t >= 300
        assert c.l2[late].max() < o.l2[late].min()
        assert np.all(np.isfinite(c.l2)) and c.l2.max() < 10 * c.l2[0]


def test_jump_continuity(scenario, closed_sim):
    """The state right at a switch is exactly the state reached before it."""
    k = 200
    tj = k * closed_sim.dt
    path = ModePath((0.0, tj), (2, 4), scenario.horizon)
    tr = closed_sim.run(path=path, snapshot_every=closed_sim.dt * 0.999)
    short = Simulator(scenario.with_(horizon=tj)).run(path=ModePath.constant(2, tj))
    idx = int(np.argmin(np.abs(np.asarray(tr.snapshot_t) - tj)))
    assert np.array_equal(tr.snapshots[idx], short.snapshots[-1])
    assert tr.mode_index[k - 1] == 2 and tr.mode_index[k] == 4


def test_seeded_runs_repeat(closed_sim):
    a, b = closed_sim.run(seed=11), closed_sim.run(seed=11)
    assert np.array_equal(a.l2, b.l2) and np.array_equal(a.U, b.U)


def test_l2_norm():
    z = np.ones((10, 4))
    assert l2_norm(z, 0.5) == pytest.approx(np.sqrt(0.5 * 40))
