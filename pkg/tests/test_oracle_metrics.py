import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lukv.errors import ConfigError, InvalidScoreError, MetricUnavailableError
from lukv.metrics import MetricSpec, compute_scores, keydiff_from_keys, keydiff_score, max_pool_same, \
    metric_ranking, snapkv_score
from lukv.oracle import ImportanceTensor, compute_oracle_importance, oracle_ranking
from lukv.trace_model import ModelShape, generate_synthetic_trace

from .conftest import bundle_from


def _imp(values):
    v = np.asarray(values, dtype=float).reshape(1, 1, -1)
    return ImportanceTensor(ModelShape(1, 1, v.shape[-1], 1), v)


# --- oracle importance -------------------------------------------------------

def test_single_step_importance():
    b = bundle_from([[[[0.5]]]], [[[2.0]]])
    assert compute_oracle_importance(b, normalize=False).values[0, 0, 0] == 1.0


def test_zero_vnorm_gives_zero_importance():
    b = bundle_from(np.full((1, 2, 3, 4), 0.2), np.zeros((1, 2, 4)))
    assert not compute_oracle_importance(b, normalize=False).values.any()
    normed = compute_oracle_importance(b, normalize=True)
    assert normed.normalization == "intra_layer" and not normed.values.any()


def test_importance_is_max_over_steps():
    # attention 0.1, 0.4, 0.2 over three steps, vnorm 3: products 0.3, 1.2, 0.6
    b = bundle_from(np.array([0.1, 0.4, 0.2]).reshape(1, 1, 3, 1), [[[3.0]]])
    got = compute_oracle_importance(b, normalize=False).values[0, 0, 0]
    expect = max(float(np.float32(a)) * 3.0 for a in (0.1, 0.4, 0.2))
    assert got == pytest.approx(1.2, rel=1e-6)
    assert got == pytest.approx(float(expect), rel=1e-12)


def test_max_dominance_and_normalization(mixed_bundle):
    raw = compute_oracle_importance(mixed_bundle, normalize=False).values
    prod = mixed_bundle.decode_attn.astype(float) * mixed_bundle.vnorm.astype(float)[:, :, None, :]
    assert (raw[:, :, None, :] >= prod).all()
    normed = compute_oracle_importance(mixed_bundle, normalize=True).values
    np.testing.assert_allclose(normed.sum(axis=(1, 2)), 1.0, atol=1e-9)
    # normalization preserves within-head rankings
    assert np.array_equal(np.argsort(-raw, axis=-1, kind="stable"), np.argsort(-normed, axis=-1, kind="stable"))


def test_scale_covariance(mixed_bundle):
    vnorm = mixed_bundle.vnorm.copy()
    vnorm[1, 2] *= 4.0  # power of two keeps float32 products exact
    scaled = bundle_from(mixed_bundle.decode_attn, vnorm)
    a = compute_oracle_importance(mixed_bundle, normalize=False)
    b = compute_oracle_importance(scaled, normalize=False)
    assert np.array_equal(b.values[1, 2], 4.0 * a.values[1, 2])
    assert np.array_equal(oracle_ranking(a).order[1, 2], oracle_ranking(b).order[1, 2])


def test_oracle_ranking_ties_and_order():
    assert oracle_ranking(_imp([0, 0, 0])).order[0, 0].tolist() == [0, 1, 2]
    # 1-based [2, 3, 1, 4]
    assert oracle_ranking(_imp([2, 5, 5, 1])).order[0, 0].tolist() == [1, 2, 0, 3]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 10)), st.data())
def test_topk_matches_bruteforce(values, data):
    k = data.draw(st.integers(0, values.size))
    order = oracle_ranking(_imp(values)).order[0, 0]
    top = set(order[:k].tolist())
    # brute force: position j belongs to the top-k iff fewer than k positions beat it
    beats = lambda j: sum(values[i] > values[j] or (values[i] == values[j] and i < j) for i in range(values.size))
    assert top == {j for j in range(values.size) if beats(j) < k}
    assert sorted(order.tolist()) == list(range(values.size))


# --- metrics -----------------------------------------------------------------

def _window_bundle(window_rows):
    w = np.asarray(window_rows, dtype=np.float32)
    W, T = w.shape
    return bundle_from(np.zeros((1, 1, 1, T)), np.ones((1, 1, T)), prefill_attn=w.reshape(1, 1, W, T))


def test_snapkv_constant_input_stays_constant():
    b = _window_bundle(np.full((4, 9), 0.125))
    s = snapkv_score(b, MetricSpec("snapkv", window_size=4, kernel_size=7))
    assert np.all(s == 0.125)


def test_snapkv_truncated_maxpool():
    b = _window_bundle([[0, 1, 0, 0, 0]])
    s = snapkv_score(b, MetricSpec("snapkv", window_size=1, kernel_size=3))
    assert s[0, 0].tolist() == [1, 1, 1, 0, 0]


def test_snapkv_kernel_one_is_window_mean():
    rows = np.random.default_rng(0).random((6, 10)).astype(np.float32)
    b = _window_bundle(rows)
    s = snapkv_score(b, MetricSpec("snapkv", window_size=3, kernel_size=1))
    np.testing.assert_array_equal(s[0, 0], rows[-3:].astype(np.float64).mean(axis=0))


def test_maxpool_against_loop():
    x = np.random.default_rng(1).random((3, 17))
    for k in (1, 3, 5, 7):
        r = k // 2
        loop = np.array([[row[max(0, j - r): j + r + 1].max() for j in range(17)] for row in x])
        np.testing.assert_array_equal(max_pool_same(x, k), loop)


def test_snapkv_monotone_in_inputs(mixed_bundle):
    spec = MetricSpec("snapkv")
    base = snapkv_score(mixed_bundle, spec)
    p = mixed_bundle.prefill_attn.copy()
    p[0, 1, -3, 17] += 0.25
    raised = snapkv_score(bundle_from(mixed_bundle.decode_attn, mixed_bundle.vnorm, prefill_attn=p), spec)
    assert (raised >= base).all()


def test_snapkv_needs_prefill_and_enough_rows():
    b = bundle_from(np.zeros((1, 1, 1, 4)), np.ones((1, 1, 4)))
    with pytest.raises(MetricUnavailableError):
        snapkv_score(b, MetricSpec("snapkv", window_size=2))
    with pytest.raises(MetricUnavailableError):
        snapkv_score(_window_bundle(np.full((2, 8), 0.1)), MetricSpec("snapkv", window_size=4))


def test_keydiff_identical_keys():
    keys = np.tile([0.3, -1.2, 2.0], (5, 1))
    np.testing.assert_allclose(keydiff_from_keys(keys), -1.0, atol=1e-12)


def test_keydiff_hand_example():
    keys = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    s = keydiff_from_keys(keys)
    np.testing.assert_allclose(s, [0.0, 0.0, -1.0], atol=1e-15)
    assert metric_ranking(s).order.tolist() == [0, 1, 2]


def test_keydiff_duplication_invariance():
    keys = np.random.default_rng(2).standard_normal((7, 4))
    np.testing.assert_allclose(keydiff_from_keys(np.vstack([keys, keys]))[:7], keydiff_from_keys(keys), atol=1e-12)


def test_keydiff_zero_key_scores_minus_one():
    keys = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 1.0]])
    assert keydiff_from_keys(keys)[0] == -1.0


def test_keydiff_zero_mean_key_scores_zero():
    keys = np.array([[1.0, 2.0], [-1.0, -2.0], [0.0, 0.0]])
    assert keydiff_from_keys(keys).tolist() == [0.0, 0.0, -1.0]


def test_keydiff_requires_keys():
    b = bundle_from(np.zeros((1, 1, 1, 4)), np.ones((1, 1, 4)))
    with pytest.raises(MetricUnavailableError):
        keydiff_score(b, MetricSpec("keydiff"))


def test_metric_ranking_examples():
    assert metric_ranking(np.array([0.3, 0.3, 0.3])).order.tolist() == [0, 1, 2]
    assert metric_ranking(np.array([1.0, 3.0, 2.0])).order.tolist() == [1, 2, 0]
    with pytest.raises(InvalidScoreError):
        metric_ranking(np.array([1.0, np.nan]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 25), elements=st.floats(-5, 5)), st.floats(-3, 3))
def test_constant_shift_keeps_ranking(scores, c):
    # shifting by a constant cannot reorder distinct floats that are far apart; use rounded scores
    scores = np.round(scores, 3)
    c = round(c, 3)
    assert np.array_equal(metric_ranking(scores).order, metric_ranking(np.round(scores + c, 3)).order)


def test_oracle_passthrough_matches_oracle(mixed_bundle):
    scores = compute_scores(mixed_bundle, MetricSpec("oracle_passthrough"))
    assert metric_ranking(scores) == oracle_ranking(compute_oracle_importance(mixed_bundle))


def test_metric_spec_validation():
    assert MetricSpec("snapkv").window_size == 32 and MetricSpec("snapkv").kernel_size == 7
    assert MetricSpec("keydiff").window_size == 1
    with pytest.raises(ConfigError):
        MetricSpec("snapkv", kernel_size=4)
    with pytest.raises(ConfigError):
        MetricSpec("entropy")
    with pytest.raises(ConfigError):
        MetricSpec("snapkv", window_size=0)
    b = generate_synthetic_trace(ModelShape(1, 1, 16, 1, 2), 0)
    with pytest.raises(ConfigError):
        snapkv_score(b, MetricSpec("snapkv", window_size=32))
