import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssctm import (AffineControlPolicy, HighwayConfig, HybridState, MarkovCapacityModel,
                   density_bounds, dynamics, flows, steady_state_probs)
from ssctm.errors import DivisionByZeroRatio, NoRoot, ValidationError
from ssctm.model import (_solve_nu, capacity_stats, cell_outflow, check_fundamental_diagram,
                         mainline_inflow, min_receiving_margin, onramp_flow)

from conftest import two_cell_model, three_cell_model


# --- Markov chain ----------------------------------------------------------

def test_single_mode_probability():
    mk = MarkovCapacityModel([[4000.0, 5000.0]], np.zeros((1, 1)))
    assert steady_state_probs(mk).tolist() == [1.0]


def test_symmetric_chain_is_uniform(two_cell):
    _, mk = two_cell
    assert np.allclose(steady_state_probs(mk), [0.5, 0.5], atol=1e-15)


def test_asymmetric_chain_matches_closed_form():
    mk = MarkovCapacityModel([[1.0], [2.0]], [[0, 0.6], [0.48, 0]])
    p = steady_state_probs(mk)
    assert p[0] == pytest.approx(0.48 / 1.08, abs=1e-14)
    assert p[1] == pytest.approx(0.6 / 1.08, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_stationary_distribution_balances(m, seed):
    r = np.random.default_rng(seed)
    lam = r.uniform(0.05, 3.0, (m, m))
    np.fill_diagonal(lam, 0.0)
    mk = MarkovCapacityModel(np.ones((m, 1)), lam)
    p = steady_state_probs(mk)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(p @ mk.generator)) < 1e-10


def test_reducible_chain_rejected():
    with pytest.raises(ValidationError):
        MarkovCapacityModel(np.ones((2, 1)), [[0, 1.0], [0, 0]])


def test_capacity_stats():
    _, mk = two_cell_model()
    assert capacity_stats(mk, np.array([0.5, 0.5]), 1) == (4500.0, 6000.0, 3000.0)
    _, mk3 = three_cell_model()
    assert capacity_stats(mk3, np.array([0.5, 0.5]), 2) == (4250.0, 6000.0, 2500.0)
    one = MarkovCapacityModel([[4000.0]], np.zeros((1, 1)))
    assert capacity_stats(one, np.ones(1), 0) == (4000.0, 4000.0, 4000.0)


# --- validation ------------------------------------------------------------

def test_last_cell_ratio_must_be_zero():
    with pytest.raises(ValidationError):
        HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.75, 0.5], [4000, 1200], [3500, 600])


def test_interior_zero_ratio_rejected():
    with pytest.raises(DivisionByZeroRatio):
        HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.0, 0.0], [4000, 1200], [3500, 600])


def test_demand_above_buffer_capacity_rejected():
    with pytest.raises(ValidationError):
        HighwayConfig.from_arrays(1.0, [100], [25], [200], [0.0], [1000], [1200])


def test_fundamental_diagram_check(two_cell):
    cfg, mk = two_cell
    check_fundamental_diagram(cfg, mk)
    bad = MarkovCapacityModel([[4000, 7000], [4000, 3000]], [[0, 0.9], [0.9, 0]])
    with pytest.raises(ValidationError):
        check_fundamental_diagram(cfg, bad)


def test_policy_validation():
    with pytest.raises(ValidationError):
        AffineControlPolicy((0.0,), (1.0,))
    with pytest.raises(ValidationError):
        AffineControlPolicy((100.0,), (-1.0,))


# --- flows -----------------------------------------------------------------

def test_mainline_inflow_examples(two_cell):
    cfg, _ = two_cell
    assert mainline_inflow(0, 35.0, cfg) == 3500.0
    assert mainline_inflow(1, 200.0, cfg) == 0.0
    assert mainline_inflow(1, 50.0, cfg) == 3750.0


def test_onramp_flow_examples(two_cell, reference_policy):
    cfg, _ = two_cell
    assert onramp_flow(1, 1.0, 60.0, cfg, reference_policy) == 1200.0
    assert onramp_flow(1, 0.0, 100.0, cfg, reference_policy) == 600.0
    assert onramp_flow(1, 1.0, 4750.0 / 25.0, cfg, reference_policy) == 0.0


def test_cell_outflow_examples(two_cell, reference_policy):
    cfg, mk = two_cell
    s = HybridState(0, np.zeros(2), np.array([0.0, 60.0]))
    assert cell_outflow(1, s, reference_policy, cfg, mk) == 6000.0
    assert cell_outflow(0, s, reference_policy, cfg, mk) == 0.0
    s = HybridState(1, np.array([0.0, 1.0]), np.array([40.0, 180.0]))
    assert cell_outflow(0, s, reference_policy, cfg, mk) == pytest.approx((25 * 120 - 250) / 0.75, rel=1e-14)


def test_demand_equilibrium_has_zero_queue_rate(two_cell):
    cfg, mk = two_cell
    G, _ = dynamics(HybridState(0, np.zeros(2), np.array([35.0, 60.0])), None, cfg, mk)
    assert G[0] == 0.0


def _state(draw_q, draw_n, cfg):
    return HybridState(0, np.asarray(draw_q), np.minimum(np.asarray(draw_n), cfg.n_jam))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=3, max_size=3),
       st.lists(st.floats(0, 300), min_size=3, max_size=3),
       st.integers(0, 1), st.floats(2500, 7000), st.floats(0, 50))
def test_conservation_identity(q, n, mode, u, kap):
    cfg, mk = three_cell_model()
    s = HybridState(mode, np.array(q), np.minimum(np.array(n), cfg.n_jam))
    pol = AffineControlPolicy((u, u), (kap, kap))
    r, f = flows(s, pol, cfg, mk)
    G, H = dynamics(s, pol, cfg, mk)
    up = np.concatenate([[0.0], cfg.beta[:-1] * f[:-1]])
    assert np.allclose(cfg.length * H + f - r - up, 0.0, atol=1e-9)
    assert np.allclose(G, cfg.alpha - r)
    # flows never exceed sending, buffer capacity or receiving room
    assert np.all(r >= 0) and np.all(f >= 0)
    assert np.all(r <= cfg.U + 1e-9)
    assert np.all(f <= mk.capacities[mode] + 1e-9)
    assert np.all(cfg.beta[:-1] * f[:-1] + r[1:] <= cfg.w[1:] * (cfg.n_jam[1:] - s.n[1:]) + 1e-6)


# --- density bounds --------------------------------------------------------

def test_density_bounds_examples(two_cell, reference_policy):
    cfg, mk = two_cell
    b = density_bounds(cfg, mk, reference_policy)
    assert b.lower_no_queue[0] == 35.0
    assert b.upper_free[1] == 180.0
    # receiving margin of cell 2 by a dense-grid oracle
    grid = np.linspace(b.lower_no_queue[1], b.upper_blocked[1], 200001)
    margin = 25 * (300 - grid) - onramp_flow(1, 1.0, grid, cfg, reference_policy)
    R = margin.min()
    assert min_receiving_margin(1, b.lower_no_queue[1], b.upper_blocked[1], cfg, reference_policy) == pytest.approx(R, abs=1e-6)
    assert b.upper_blocked[0] == pytest.approx(200 - min(4000, R / 0.75) / 25, abs=1e-8)


def test_nu_is_a_root(two_cell, reference_policy):
    cfg, _ = two_cell
    for inflow in (0.0, 1000.0, 2625.0, 3000.0):
        nu = _solve_nu(1, inflow, cfg, reference_policy)
        assert inflow + onramp_flow(1, 1.0, nu, cfg, reference_policy) == pytest.approx(100 * nu, abs=1e-8)


def test_nu_missing_root_raises(two_cell):
    cfg, _ = two_cell
    with pytest.raises(NoRoot):
        _solve_nu(1, -2000.0, cfg, None)


@settings(max_examples=100, deadline=None)
@given(st.floats(2000, 3900), st.floats(0, 1200), st.floats(1000, 8000), st.floats(0, 60))
def test_bounds_ordering(a1, a2, u, kap):
    cfg, mk = two_cell_model()
    cfg = cfg.with_demands([a1, a2])
    b = density_bounds(cfg, mk, AffineControlPolicy((u,), (kap,)))
    assert np.all(b.lower_no_queue >= 0)
    assert np.all(b.lower_no_queue <= b.upper_free + 1e-9)
    assert np.all(b.upper_blocked <= cfg.n_jam)
    assert np.all(b.lower_with_queue >= 0)
