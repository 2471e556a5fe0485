import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssctm import (AffineControlPolicy, DesignScheme, HighwayConfig, HybridState, MarkovCapacityModel,
                   density_bounds, mean_drift)
from ssctm.errors import ValidationError
from ssctm.stability import (FULL, LOCALIZED, PARTIAL, check_decoupling, congestion_sets,
                             decoupled_verdict, pc_decoupled_conditions, pc_equivalence_check,
                             coupling, gamma, invariant_set, net_flow_objective, solve_b_system,
                             weighted_net_flow)

from conftest import two_cell_model, three_cell_model


def test_gamma_examples():
    assert gamma(2, 2, [0.75, 0.6, 0.0]) == 1.0
    assert gamma(0, 2, [0.75, 0.6, 0.0]) == pytest.approx(0.45, abs=1e-15)
    assert gamma(0, 1, [0.75, 0.0]) == 0.75


def test_coupling_is_symmetric_gamma():
    betas = [0.75, 0.6, 0.9, 0.0]
    for k in range(4):
        c = coupling(k, betas)
        for j in range(4):
            ref = gamma(j, k, betas) if j <= k else gamma(k, j, betas)
            assert c[j] == pytest.approx(ref, rel=1e-15)


def test_localized_requires_two_cells(three_cell):
    cfg, mk = three_cell
    with pytest.raises(ValidationError):
        mean_drift(DesignScheme(LOCALIZED), AffineControlPolicy((5000, 5000), (25, 25)), cfg, mk)


# --- net flows -------------------------------------------------------------

@settings(max_examples=150, deadline=None)
@given(st.sampled_from([LOCALIZED, FULL, PARTIAL]), st.integers(0, 1), st.integers(0, 1),
       st.lists(st.booleans(), min_size=2, max_size=2),
       st.floats(0, 200), st.floats(0, 300), st.floats(3000, 6000), st.floats(0, 50))
def test_direct_and_expanded_forms_agree(variant, k, mode, q, n1, n2, u, kap):
    cfg, mk = two_cell_model()
    pol = AffineControlPolicy((u,), (kap,))
    b = density_bounds(cfg, mk, pol)
    s = HybridState(mode, np.array(q, dtype=float), np.array([n1, n2]))
    sch = DesignScheme(variant)
    d = weighted_net_flow(sch, k, s, pol, cfg, mk, b)
    e = weighted_net_flow(sch, k, s, pol, cfg, mk, b, form="expanded")
    assert d == pytest.approx(e, abs=1e-8 * max(1.0, abs(d)))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 200), st.floats(0, 300), st.integers(0, 1))
def test_unit_weight_two_cell_formula(n1, n2, mode):
    cfg, mk = two_cell_model()
    pol = AffineControlPolicy((4750.0,), (25.0,))
    b = density_bounds(cfg, mk, pol)
    s = HybridState(mode, np.zeros(2), np.array([n1, n2]))
    from ssctm import flows
    _, f = flows(s, pol, cfg, mk)
    be, a1, a2 = 0.75, 3500.0, 600.0
    ref = (1 - be ** 2) * (a1 - f[0]) + be * (be * a1 + a2 - f[1])
    got = weighted_net_flow(DesignScheme(FULL, unit_weights=True), 0, s, pol, cfg, mk, b)
    assert got == pytest.approx(ref, abs=1e-8)


def test_hand_expanded_localized_value(two_cell, reference_policy):
    cfg, mk = two_cell
    b = density_bounds(cfg, mk, reference_policy)
    n1 = b.lower_with_queue[0]
    assert n1 == 40.0
    s = HybridState(1, np.ones(2), np.array([n1, 180.0]))
    # r1 = 4000, r2 = min(1200, 3000, 250) = 250, f1 = (3000 - 250)/0.75, f2 = 3000, rho_2 = 1
    f1 = 2750 / 0.75
    ref = (3500 - 4000) + (4000 - f1) + 0.75 * ((600 - 250) + (0.75 * f1 + 250 - 3000))
    got = weighted_net_flow(DesignScheme(LOCALIZED), 0, s, reference_policy, cfg, mk, b)
    assert got == pytest.approx(ref, abs=1e-9)


# --- sets ------------------------------------------------------------------

def test_localized_sets(two_cell, reference_policy):
    cfg, mk = two_cell
    b = density_bounds(cfg, mk, reference_policy)
    sets = congestion_sets(DesignScheme(LOCALIZED), b, 2)
    assert len(sets[0]) == 2
    assert {bx.queued for bx in sets[0]} == {(True, False), (True, True)}
    (box,) = sets[1]
    assert box.queued == (False, True)
    assert box.lo[0] == box.hi[0] == b.lower_no_queue[0]
    assert box.lo[1] == b.lower_with_queue[1] and box.hi[1] == b.upper_free[1]


def test_full_set_count(three_cell):
    cfg, mk = three_cell
    b = density_bounds(cfg, mk, AffineControlPolicy((4950, 5700), (25, 25)))
    boxes = congestion_sets(DesignScheme(FULL), b, 3, [1])[1]
    assert len(boxes) == 4
    assert all(bx.queued[1] for bx in boxes)
    assert len(invariant_set(DesignScheme(FULL), b, 3)) == 8


def test_partial_sets_pin_upstream_density(three_cell):
    cfg, mk = three_cell
    b = density_bounds(cfg, mk, AffineControlPolicy((4950, 5700), (25, 25)))
    for bx in congestion_sets(DesignScheme(PARTIAL), b, 3, [2])[2]:
        assert bx.queued[2]
        assert bx.lo[1] == bx.hi[1] == b.lower_no_queue[1]


def test_invariant_set_two_cells(two_cell, reference_policy):
    cfg, mk = two_cell
    b = density_bounds(cfg, mk, reference_policy)
    M = invariant_set(DesignScheme(LOCALIZED), b, 2)
    assert len(M) == 4
    assert M.contains([0, 0], b.lower_no_queue)
    assert not M.contains([0, 0], b.lower_no_queue - 1.0)
    lo, hi = M.as_arrays()
    assert lo.shape == (4, 2) and not np.isnan(lo).any()


# --- mean drift --------------------------------------------------------------

def test_reference_policy_is_stable(two_cell, reference_policy):
    cfg, mk = two_cell
    r = mean_drift(DesignScheme(LOCALIZED), reference_policy, cfg, mk)
    assert r.stable and r.verdict == "Stable"
    assert r.mean_drift == np.nanmax(r.buffer_means)
    assert r.queue_bound_proxy == pytest.approx(-1.0 / r.mean_drift)


def _grid_box_max(obj, lo, hi, pts=4001):
    axes = [np.linspace(lo[j], hi[j], pts) if hi[j] > lo[j] else np.array([lo[j]]) for j in range(len(lo))]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(lo))
    return obj.value(X).max()


def test_mean_drift_matches_brute_force(two_cell, reference_policy):
    cfg, mk = two_cell
    sch = DesignScheme(LOCALIZED)
    b = density_bounds(cfg, mk, reference_policy)
    ref = []
    for k, boxes in congestion_sets(sch, b, 2).items():
        per_mode = [max(_grid_box_max(net_flow_objective(sch, k, s, bx.queued, reference_policy, cfg, mk, b), bx.lo, bx.hi)
                        for bx in boxes) for s in range(2)]
        ref.append(0.5 * sum(per_mode))
    r = mean_drift(sch, reference_policy, cfg, mk)
    assert np.allclose(r.buffer_means, ref, atol=1e-4)
    assert r.buffer_means[0] >= ref[0] - 1e-9


def test_overloaded_mainline_unstable():
    cfg = HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.75, 0.0],
                                    [5000, 1200], [4500, 600])
    mk = MarkovCapacityModel([[4000, 6000]], np.zeros((1, 1)))
    r = mean_drift(DesignScheme(LOCALIZED), AffineControlPolicy((4750,), (25,)), cfg, mk)
    assert r.buffer_means[0] > 0 and not r.stable


def test_single_mode_no_averaging():
    cfg = HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.75, 0.0],
                                    [4000, 1200], [3500, 600])
    mk = MarkovCapacityModel([[4000, 6000]], np.zeros((1, 1)))
    r = mean_drift(DesignScheme(LOCALIZED), AffineControlPolicy((4750,), (25,)), cfg, mk)
    for e in r.entries:
        assert r.buffer_means[e.buffer] == e.value


# --- b-system -----------------------------------------------------------------

def test_b_constant_z_is_zero(two_cell):
    _, mk = two_cell
    cert = solve_b_system(np.array([[3.0, -1.0], [3.0, -1.0]]), mk)
    assert np.allclose(cert.b, 0.0, atol=1e-12)


def test_b_two_mode_closed_form(two_cell):
    _, mk = two_cell
    z = np.array([[1.0, 5.0], [4.0, -2.0]])
    cert = solve_b_system(z, mk)
    assert np.allclose(cert.b[1] - cert.b[0], (z[1] - z[0]) / 1.8, atol=1e-12)
    assert np.all(cert.b.min(axis=0) == 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_b_kernel_shift(m, K, seed, shift):
    r = np.random.default_rng(seed)
    lam = r.uniform(0.1, 2.0, (m, m))
    np.fill_diagonal(lam, 0.0)
    mk = MarkovCapacityModel(np.ones((m, K)), lam)
    z = r.normal(0, 100, (m, K))
    cert = solve_b_system(z, mk)
    p = mk.generator
    from ssctm import steady_state_probs
    target = steady_state_probs(mk) @ z
    res = z + p @ (cert.b + shift) - target
    assert np.max(np.abs(res)) < 1e-9 * max(1.0, np.abs(z).max())
    assert cert.residual < 1e-9 * max(1.0, np.abs(z).max())
    assert np.all(cert.b >= 0)


# --- special cases --------------------------------------------------------------

def test_decoupling_examples(two_cell):
    cfg, mk = two_cell
    assert check_decoupling(AffineControlPolicy((10.0,), (1000.0,)), cfg, mk)[0]
    tight = HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 250], [0.75, 0.0],
                                      [4000, 1200], [3500, 600])
    mk2 = MarkovCapacityModel([[4000, 5000], [4000, 3000]], [[0, 0.9], [0.9, 0]])
    assert not check_decoupling(None, tight, mk2)[0]


def test_decoupled_gating_and_verdict(two_cell):
    cfg, mk = two_cell
    res = decoupled_verdict(cfg, mk, AffineControlPolicy((10.0,), (1000.0,)))
    if res.applicable:
        assert res.stable_iff is True
    low_U = HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.75, 0.0],
                                      [3900, 1200], [3500, 600])
    assert decoupled_verdict(low_U, mk, AffineControlPolicy((4750,), (25,))) .applicable is False


def test_decoupled_strict_boundary():
    # demand exactly at the mean capacity gives no stability claim
    cfg = HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.75, 0.0],
                                    [4000, 1200], [4000, 600])
    mk = MarkovCapacityModel([[4000, 3000], [4000, 2900]], [[0, 0.9], [0.9, 0]])
    res = decoupled_verdict(cfg, mk, AffineControlPolicy((10.0,), (1000.0,)))
    assert res.stable_iff in (False, None)


def _decoupled3():
    cfg = HighwayConfig.from_arrays(1.0, [100] * 3, [25] * 3, [330, 288, 357], [0.88, 0.95, 0.0],
                                    [4045, 1616, 987], [3665, 1141, 764])
    mk = MarkovCapacityModel([[3339, 3329, 3213], [3325, 3075, 3197]], [[0, 0.9], [0.9, 0]])
    return cfg, mk, AffineControlPolicy((2766.0, 2766.0), (16.4, 16.4))


def test_pc_decoupled_synthetic_equivalence():
    cfg, mk, pol = _decoupled3()
    assert pc_decoupled_conditions(cfg, mk, pol)
    assert pc_equivalence_check(cfg, mk, pol)


def test_pc_decoupled_conditions_fail_gives_false(three_cell):
    cfg, mk = three_cell
    pol = AffineControlPolicy((4950, 5700), (25, 25))
    if not pc_decoupled_conditions(cfg, mk, pol):
        assert pc_equivalence_check(cfg, mk, pol) is False
