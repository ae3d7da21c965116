import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dechw import aggregation as ag
from dechw.errors import DimensionError, ProtocolError


def bundles(params, sizes, hessians=None, senders=None):
    params = [np.asarray(p, dtype=np.float32) for p in params]
    senders = senders or list(range(len(params)))
    hessians = hessians if hessians is not None else [None] * len(params)
    return [ag.NeighborBundle(s, p, n, None if h is None else np.asarray(h, dtype=np.float32))
            for s, p, n, h in zip(senders, params, sizes, hessians)]


# ---------------------------------------------------------------- size weights


def test_size_weights_examples():
    assert np.allclose(ag.size_weights(bundles([[0], [0]], [30, 70])), [0.3, 0.7])
    assert np.allclose(ag.size_weights(bundles([[0]] * 4, [5] * 4)), [0.25] * 4)


def test_size_weights_follow_sender_order():
    b = bundles([[0], [0]], [70, 30], senders=[5, 2])
    assert np.allclose(ag.size_weights(b), [0.3, 0.7])


def test_zero_sizes_fall_back_to_uniform(caplog):
    with caplog.at_level(logging.WARNING):
        w = ag.size_weights(bundles([[0]] * 3, [0, 0, 0]))
    assert np.allclose(w, [1 / 3] * 3) and "zero samples" in caplog.text


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=20))
def test_size_weights_sum_to_one(sizes):
    assert abs(ag.size_weights(bundles([[0]] * len(sizes), sizes)).sum() - 1) <= 1e-9


# ---------------------------------------------------------------- dechetero


def test_dechetero_examples():
    same = ag.dechetero_aggregate(bundles([[1.5, -2.0], [1.5, -2.0]], [3, 9]))
    assert np.array_equal(same.params, np.float32([1.5, -2.0]))
    assert ag.dechetero_aggregate(bundles([[0], [2]], [1, 1])).params.tolist() == [1.0]
    out = ag.dechetero_aggregate(bundles([[0], [2]], [1, 3]))
    assert out.params.tolist() == [1.5] and out.fallback_count == 1 and out.participants == 2


def test_dechetero_length_mismatch():
    with pytest.raises(DimensionError):
        ag.dechetero_aggregate(bundles([[0, 1], [2]], [1, 1]))


def test_empty_bundle_list():
    with pytest.raises(ValueError):
        ag.dechetero_aggregate([])


# ---------------------------------------------------------------- hessian weights


def test_hessian_weights_examples():
    assert np.allclose(ag.hessian_weights(bundles([[0], [0]], [1, 1], [[2], [2]]), 0), [0.5, 0.5])
    assert np.allclose(ag.hessian_weights(bundles([[0], [0]], [1, 1], [[1], [3]]), 0), [0.25, 0.75])
    assert ag.hessian_weights(bundles([[0], [0]], [1, 1], [[0], [0]]), 0) is None


def test_missing_hessian_is_protocol_error():
    b = bundles([[0], [0]], [1, 1], [[1], None])
    with pytest.raises(ProtocolError):
        ag.hessian_weights(b, 0)
    with pytest.raises(ProtocolError):
        ag.dechw_aggregate(b)


def test_negative_hessian_is_protocol_error():
    with pytest.raises(ProtocolError):
        ag.dechw_aggregate(bundles([[0], [0]], [1, 1], [[-1], [2]]))


# ---------------------------------------------------------------- dechw


def test_hybrid_branch_by_hand():
    out = ag.dechw_aggregate(bundles([[4, 0], [0, 4]], [1, 1], [[1, 0], [3, 0]]))
    assert out.params.tolist() == [1.0, 2.0]
    assert out.fallback_count == 1 and out.participants == 2


def test_identical_hessians_give_uniform_mean():
    rng = np.random.default_rng(0)
    params = rng.normal(size=(3, 6)).astype(np.float32)
    h = np.abs(rng.normal(size=6)).astype(np.float32) * 1e3
    out = ag.dechw_aggregate(bundles(params, [1, 50, 7], [h, h, h]), keep_weights=True)
    nonzero = h > 0
    assert np.all(out.weights[:, nonzero] == 1 / 3)
    ref = ag._combine(list(params), np.full((3, 6), 1 / 3), np.float32)
    assert np.array_equal(out.params, ref)


def test_all_zero_hessians_equal_dechetero_bitwise():
    rng = np.random.default_rng(1)
    params = rng.normal(size=(4, 50)).astype(np.float32)
    sizes = [13, 2, 40, 7]
    zeros = [np.zeros(50)] * 4
    hw = ag.dechw_aggregate(bundles(params, sizes, zeros))
    hetero = ag.dechetero_aggregate(bundles(params, sizes))
    assert hw.params.tobytes() == hetero.params.tobytes()
    assert hw.fallback_count == 50


def test_result_is_order_independent():
    rng = np.random.default_rng(2)
    params = rng.normal(size=(3, 8)).astype(np.float32)
    hs = np.abs(rng.normal(size=(3, 8)))
    b = bundles(params, [1, 2, 3], list(hs), senders=[4, 1, 9])
    a1 = ag.dechw_aggregate(b)
    a2 = ag.dechw_aggregate(list(reversed(b)))
    assert a1.params.tobytes() == a2.params.tobytes()


def test_single_participant_is_identity():
    p = np.float32([1.25, -3.5, 7.0])
    for strategy in ag.STRATEGIES:
        out = ag.aggregate(strategy, bundles([p], [5], [[0.0, 1.0, 2.0]]))
        assert np.array_equal(out.params, p)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        ag.aggregate("fedprox", bundles([[0]], [1], [[1]]))


def scenario():
    n = st.integers(1, 6)
    m = st.integers(1, 12)
    return st.tuples(n, m).flatmap(lambda nm: st.tuples(
        arrays(np.float32, nm, elements=st.floats(-100, 100, width=32)),
        arrays(np.float32, nm, elements=st.one_of(st.just(0.0), st.floats(0, 1e3, width=32))),
        st.lists(st.integers(0, 500), min_size=nm[0], max_size=nm[0]),
    ))


@settings(max_examples=100, deadline=None)
@given(scenario())
def test_weights_sum_to_one_and_output_is_convex(case):
    params, hess, sizes = case
    out = ag.dechw_aggregate(bundles(params, sizes, list(hess)), keep_weights=True)
    assert np.all(np.abs(out.weights.sum(axis=0) - 1) <= 1e-9)
    assert np.all(out.weights >= 0)
    lo, hi = params.min(axis=0), params.max(axis=0)
    tol = 1e-5 * np.maximum(1, np.abs(params).max(axis=0))
    assert np.all(out.params >= lo - tol) and np.all(out.params <= hi + tol)
    assert 0 <= out.fallback_count <= params.shape[1]
    assert out.fallback_count == int(np.sum(hess.astype(np.float64).sum(axis=0) <= ag.EPS_FALLBACK))


@settings(max_examples=60, deadline=None)
@given(scenario(), st.floats(1e-3, 1e3))
def test_hessian_scale_invariance(case, c):
    params, hess, sizes = case
    h64 = hess.astype(np.float64)
    keep = h64.sum(axis=0) > 1e-6  # keep columns away from the fallback cutoff after scaling
    h64[:, ~keep] = 0
    base = ag.dechw_aggregate([ag.NeighborBundle(j, params[j], sizes[j], h64[j]) for j in range(len(sizes))])
    scaled = ag.dechw_aggregate([ag.NeighborBundle(j, params[j], sizes[j], c * h64[j]) for j in range(len(sizes))])
    assert np.allclose(base.params, scaled.params, rtol=1e-5, atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(scenario(), st.integers(-8, 8))
def test_power_of_two_scaling_is_exact(case, k):
    params, hess, sizes = case
    h64 = hess.astype(np.float64)
    h64[:, h64.sum(axis=0) <= ag.EPS_FALLBACK * 2.0 ** 8] = 0
    base = ag.dechw_aggregate([ag.NeighborBundle(j, params[j], sizes[j], h64[j]) for j in range(len(sizes))])
    scaled = ag.dechw_aggregate([ag.NeighborBundle(j, params[j], sizes[j], 2.0 ** k * h64[j])
                                 for j in range(len(sizes))])
    assert base.params.tobytes() == scaled.params.tobytes()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 20), elements=st.floats(-1e3, 1e3, width=32)), st.integers(1, 8),
       st.data())
def test_idempotence(p, n, draw):
    hess = [draw.draw(arrays(np.float32, len(p), elements=st.floats(0, 10, width=32))) for _ in range(n)]
    sizes = draw.draw(st.lists(st.integers(0, 100), min_size=n, max_size=n))
    for strategy in ag.STRATEGIES:
        out = ag.aggregate(strategy, bundles([p] * n, sizes, hess))
        assert np.allclose(out.params, p, rtol=1e-6, atol=1e-6)
