import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssctm import AffineControlPolicy, DesignScheme, density_bounds
from ssctm import inner
from ssctm.errors import Unsupported
from ssctm.stability import FULL, LOCALIZED, congestion_sets, net_flow_objective

from conftest import two_cell_model, three_cell_model


def _problem(cfg, mk, pol, scheme, k, mode, box_index=0):
    b = density_bounds(cfg, mk, pol)
    box = congestion_sets(scheme, b, cfg.K, [k])[k][box_index]
    obj = net_flow_objective(scheme, k, mode, box.queued, pol, cfg, mk, b)
    return obj, box


def _grid_max(obj, lo, hi, pts):
    free = np.where(hi - lo > 1e-12)[0]
    axes = [np.linspace(lo[j], hi[j], pts) if j in free else np.array([lo[j]]) for j in range(len(lo))]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(lo))
    return obj.value(X).max()


def test_table1_one_dimensional_instance_matches_grid(two_cell, reference_policy):
    cfg, mk = two_cell
    obj, box = _problem(cfg, mk, reference_policy, DesignScheme(LOCALIZED), 1, 1)
    val, arg = inner.maximize(obj, box.lo, box.hi)
    ref = _grid_max(obj, box.lo, box.hi, 100001)
    assert val >= ref - 1e-9
    assert val == pytest.approx(ref, abs=1e-6)
    assert obj.value(arg) == pytest.approx(val, abs=1e-9)


def test_point_box_returns_value_at_point(two_cell, reference_policy):
    cfg, mk = two_cell
    obj, box = _problem(cfg, mk, reference_policy, DesignScheme(LOCALIZED), 1, 0)
    x = box.lo.copy()
    val, arg = inner.maximize(obj, x, x)
    assert np.array_equal(arg, x)
    assert val == pytest.approx(float(obj.value(x)))


def test_monotone_objective_attains_endpoint(two_cell):
    # unit weights and no control: D_2 = alpha_2 + beta_1 f_1 - f_2 is
    # non-increasing in n_2 once cell 2 sends at capacity... check endpoint
    cfg, mk = two_cell
    obj, box = _problem(cfg, mk, None, DesignScheme(LOCALIZED, unit_weights=True), 1, 1)
    val, arg = inner.maximize(obj, box.lo, box.hi)
    xs = np.linspace(box.lo[1], box.hi[1], 20001)
    X = np.stack([np.full_like(xs, box.lo[0]), xs], 1)
    v = obj.value(X)
    assert val == pytest.approx(v.max(), abs=1e-6)
    if np.all(np.diff(v) <= 1e-12):
        assert arg[1] == pytest.approx(box.lo[1])


@settings(max_examples=40, deadline=None)
@given(st.floats(3000, 6000), st.floats(0, 50), st.integers(0, 1), st.integers(0, 2), st.integers(0, 3))
def test_exact_dominates_grid_three_cells(u, kap, mode, k, bi):
    cfg, mk = three_cell_model()
    pol = AffineControlPolicy((u, u + 500), (kap, kap))
    b = density_bounds(cfg, mk, pol)
    boxes = congestion_sets(DesignScheme(FULL), b, 3, [k])[k]
    box = boxes[bi % len(boxes)]
    obj = net_flow_objective(DesignScheme(FULL), k, mode, box.queued, pol, cfg, mk, b)
    val, arg = inner.maximize(obj, box.lo, box.hi)
    assert np.all(arg >= box.lo - 1e-9) and np.all(arg <= box.hi + 1e-9)
    assert obj.value(arg) == pytest.approx(val, abs=1e-7)
    ref = _grid_max(obj, box.lo, box.hi, 41)
    assert val >= ref - 1e-7 * max(1.0, abs(ref))


def _four_cell():
    from ssctm import HighwayConfig, MarkovCapacityModel
    cfg = HighwayConfig.from_arrays(1.0, [100] * 4, [25] * 4, [200, 300, 300, 300], [0.75, 0.6, 0.8, 0.0],
                                    [4000, 1200, 1200, 1200], [3500, 600, 800, 500])
    mk = MarkovCapacityModel([[4000, 6000, 6000, 5000], [4000, 3000, 2500, 5000]], [[0, 0.9], [0.9, 0]])
    return cfg, mk


def test_too_many_free_densities_unsupported():
    cfg, mk = _four_cell()
    pol = AffineControlPolicy((5000, 5500, 5000), (25, 25, 25))
    obj, box = _problem(cfg, mk, pol, DesignScheme(FULL), 0, 1, box_index=7)
    with pytest.raises(Unsupported):
        inner.maximize(obj, box.lo, box.hi)
    val, arg = inner.maximize(obj, box.lo, box.hi, fallback=inner.FallbackOptions())
    assert obj.value(arg) == pytest.approx(val, abs=1e-7)
    assert np.all(arg >= box.lo - 1e-9) and np.all(arg <= box.hi + 1e-9)
    assert val >= _grid_max(obj, box.lo, box.hi, 9) - 1e-6


def test_breakpoints_sorted_within_axis(two_cell, reference_policy):
    cfg, mk = two_cell
    obj, box = _problem(cfg, mk, reference_policy, DesignScheme(LOCALIZED), 1, 1)
    bp = inner.axis_breakpoints(obj, 1, box.lo[1], box.hi[1])
    assert bp[0] == box.lo[1] and bp[-1] == box.hi[1]
    assert np.all(np.diff(bp) > 0)
