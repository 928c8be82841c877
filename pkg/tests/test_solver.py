import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lukv.errors import ConfigError, GuardrailError, InfeasibleBudgetError, InvalidCurveError
from lukv.selftest import lower_hull_minorant, random_curves
from lukv.solver import (
    adaptive_allocate,
    baseline_allocate,
    brute_force_allocate,
    convexify_curves,
    curve_objective,
    greedy_allocate,
    greedy_allocate_many,
    marginal_gains,
    mckp_dp_allocate,
    mckp_dp_allocate_many,
    pava,
    pava_convexify,
    pyramid_allocate,
    pyramid_layer_budgets,
    uniform_allocate,
)

from .conftest import brute_gcm, brute_min_allocation


def curves_from_gains(gains):
    g = np.asarray(gains, dtype=float)
    total = g.sum(axis=-1, keepdims=True)
    return np.concatenate([total, total - np.cumsum(g, axis=-1)], axis=-1)


# --- PAVA / convexification ---------------------------------------------------

def test_pava_worked_example():
    c = pava_convexify(np.array([10.0, 6, 5, 1, 0]))
    assert c.values.tolist() == [10, 6, 3.5, 1, 0]
    assert marginal_gains(c).values.tolist() == [4, 2.5, 2.5, 1]
    assert c.contact.tolist() == [True, True, False, True, True]


def test_pava_fixed_points():
    assert pava_convexify(np.array([6.0, 3, 1, 0])).values.tolist() == [6, 3, 1, 0]
    const = pava_convexify(np.full(5, 2.5))
    assert const.values.tolist() == [2.5] * 5
    assert not marginal_gains(const).values.any()


def test_pava_rejects_increasing_curve():
    with pytest.raises(InvalidCurveError):
        pava_convexify(np.array([3.0, 4.0, 0.0]))


def test_pava_isotonic_basics():
    assert pava([0.5, 0.4, 0.6]).tolist() == pytest.approx([0.45, 0.45, 0.6])
    np.testing.assert_allclose(pava([1.0, 3.0, 2.0], increasing=False), [2.0, 2.0, 2.0])
    np.testing.assert_allclose(pava([4, 1, 4, 1], increasing=False), [4, 2.5, 2.5, 1])
    np.testing.assert_allclose(pava([3, 1], weights=[3, 1]), [2.5, 2.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_pava_equals_brute_gcm(seed, T):
    curve = random_curves(np.random.default_rng(seed), 1, T)[0]
    c = pava_convexify(curve)
    np.testing.assert_allclose(c.values, brute_gcm(curve), atol=1e-9)
    np.testing.assert_allclose(c.values, lower_hull_minorant(curve), atol=1e-9)
    assert (c.values <= curve + 1e-12).all()
    assert c.values[0] == curve[0] and c.values[-1] == curve[-1]
    assert (np.diff(c.gains) <= 0).all() and (c.gains >= 0).all()


# --- greedy ----------------------------------------------------------------------

GREEDY_GAINS = np.array([[5.0, 3, 1], [4.0, 2, 1]])


def test_greedy_example():
    a = greedy_allocate(GREEDY_GAINS, 3)
    assert a.budgets.tolist() == [2, 1]
    assert -a.objective == 12
    assert brute_min_allocation(curves_from_gains(GREEDY_GAINS), 3)[1] == (2, 1)


def test_greedy_extremes():
    surrogate = curves_from_gains(GREEDY_GAINS)
    zero = greedy_allocate(GREEDY_GAINS, 0, surrogate)
    assert zero.budgets.tolist() == [0, 0] and zero.objective == surrogate[:, 0].sum()
    full = greedy_allocate(GREEDY_GAINS, 6, surrogate)
    assert full.budgets.tolist() == [3, 3] and full.objective == 0
    with pytest.raises(InfeasibleBudgetError):
        greedy_allocate(GREEDY_GAINS, 7)
    with pytest.raises(InfeasibleBudgetError):
        greedy_allocate(GREEDY_GAINS, -1)


def test_greedy_ties_go_to_lower_head():
    assert greedy_allocate(np.ones((3, 2)), 2).budgets.tolist() == [2, 0, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 20))
def test_greedy_nesting_and_batch(seed, n, T):
    curves = random_curves(np.random.default_rng(seed), n, T)
    surrogate, gains = convexify_curves(curves)
    many = greedy_allocate_many(gains, range(n * T + 1), surrogate)
    prev = np.zeros(n, dtype=np.int64)
    for B, alloc in enumerate(many):
        single = greedy_allocate(gains, B, surrogate)
        assert np.array_equal(single.budgets, alloc.budgets)
        alloc.check(T)
        diff = alloc.budgets - prev
        assert B == 0 or (np.count_nonzero(diff) == 1 and diff.sum() == 1)
        prev = alloc.budgets


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 24), st.data())
def test_greedy_equals_dp_on_convexified(seed, n, T, data):
    curves = random_curves(np.random.default_rng(seed), n, T)
    surrogate, gains = convexify_curves(curves)
    B = data.draw(st.integers(0, n * T))
    g = greedy_allocate(gains, B, surrogate)
    d = mckp_dp_allocate(surrogate, B)
    assert abs(g.objective - d.objective) <= 1e-9
    # greedy never beats the raw optimum
    assert curve_objective(curves, g.budgets) >= mckp_dp_allocate(curves, B).objective - 1e-9


# --- DP and brute force ----------------------------------------------------------

DP_CURVES = np.array([[10.0, 9, 2, 2], [8.0, 4, 3, 0]])


def test_dp_example():
    a = mckp_dp_allocate(DP_CURVES, 3)
    assert a.budgets.tolist() == [2, 1] and a.objective == 6
    b = brute_force_allocate(DP_CURVES, 3)
    assert b.budgets.tolist() == [2, 1] and b.objective == 6
    assert brute_force_allocate(DP_CURVES, 0).budgets.tolist() == [0, 0]


def test_dp_single_head():
    curve = np.array([[7.0, 4, 4, 1, 0]])
    for B in range(5):
        a = mckp_dp_allocate(curve, B)
        assert a.budgets.tolist() == [B] and a.objective == curve[0, B]


def test_dp_identical_convex_curves_match_greedy():
    curves = np.tile([6.0, 3, 1, 0], (3, 1))
    surrogate, gains = convexify_curves(curves)
    for B in range(10):
        assert mckp_dp_allocate(curves, B).objective == pytest.approx(
            greedy_allocate(gains, B, surrogate).objective, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4))
def test_dp_equals_exhaustive(seed, n, T):
    curves = random_curves(np.random.default_rng(seed), n, T)
    many = mckp_dp_allocate_many(curves, range(n * T + 1))
    for B, alloc in enumerate(many):
        best, _ = brute_min_allocation(curves, B)
        assert alloc.objective == brute_force_allocate(curves, B).objective
        assert alloc.objective == pytest.approx(best, abs=1e-12)
        assert alloc.objective == curve_objective(curves, alloc.budgets)
        alloc.check(T)


def test_brute_guardrail():
    with pytest.raises(GuardrailError):
        brute_force_allocate(np.zeros((6, 3)), 1)
    with pytest.raises(GuardrailError):
        brute_force_allocate(np.zeros((2, 14)), 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 10),
       st.sampled_from([0.5, 3.0, 1024.0]), st.data())
def test_scale_invariance(seed, n, T, c, data):
    curves = random_curves(np.random.default_rng(seed), n, T)
    B = data.draw(st.integers(0, n * T))
    _, g1 = convexify_curves(curves)
    _, g2 = convexify_curves(curves * c)
    assert np.array_equal(greedy_allocate(g1, B).budgets, greedy_allocate(g2, B).budgets)
    assert mckp_dp_allocate(curves, B).objective * c == pytest.approx(
        mckp_dp_allocate(curves * c, B).objective, rel=1e-9, abs=1e-12)


# --- baselines -------------------------------------------------------------------

def test_uniform_example():
    assert uniform_allocate(2, 2, 3, 8).budgets.tolist() == [[2, 2], [2, 2]]
    assert uniform_allocate(2, 2, 3, 9).budgets.tolist() == [[3, 2], [2, 2]]


def test_adaptive_with_full_safeguard_is_uniform_within_layers():
    scores = np.random.default_rng(0).random((3, 4, 20))
    for B in (0, 12, 37, 100, 240):
        a = adaptive_allocate(scores, B, alpha=1.0)
        layer = uniform_allocate(3, 1, 80, B).budgets[:, 0]
        assert a.budgets.sum() == B
        for l in range(3):
            assert a.budgets[l].max() - a.budgets[l].min() <= 1
            assert a.budgets[l].sum() == layer[l]


def test_adaptive_follows_scores():
    scores = np.zeros((1, 2, 10))
    scores[0, 1] = 1.0
    a = adaptive_allocate(scores, 10, alpha=0.2)
    assert a.budgets.tolist() == [[1, 9]]


@pytest.mark.parametrize("B", [4, 40, 333, 1000, 4095, 4096])
def test_pyramid_ramp(B):
    layer = pyramid_layer_budgets(4, 8, 128, B)
    assert layer.sum() == B
    assert (np.diff(layer) <= 0).all()
    assert (layer <= 8 * 128).all()


def test_pyramid_strictly_decreasing_at_moderate_budget():
    layer = pyramid_layer_budgets(4, 8, 128, 1000, beta=20)
    assert (np.diff(layer) < 0).all()
    # ramp ends: 2m - m/beta and m/beta with m = 250
    assert layer[0] in (487, 488) and layer[-1] in (12, 13)
    with pytest.raises(ConfigError):
        pyramid_layer_budgets(4, 8, 128, 1000, beta=0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 12), st.data())
def test_baselines_conserve_budget(L, H, T, data):
    B = data.draw(st.integers(0, L * H * T))
    scores = np.random.default_rng(B).random((L, H, T))
    for kind in ("uniform", "pyramid", "adaptive_topk"):
        a = baseline_allocate(kind, (L, H, T), B, scores=scores)
        assert a.budgets.shape == (L, H)
        a.check(T)
    with pytest.raises(ConfigError):
        baseline_allocate("adaptive", (L, H, T), B)
    with pytest.raises(InfeasibleBudgetError):
        pyramid_allocate(L, H, T, L * H * T + 1)
