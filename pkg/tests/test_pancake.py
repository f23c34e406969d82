"""Smoothing plans, batch generation and the write buffer."""

import math
from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from shortstack.crypto import CryptoSuite
from shortstack.pancake import (
    DUMMY_KEY,
    AccessDistribution,
    ClientOp,
    DummyWriteError,
    InvalidDistribution,
    OpKind,
    Replica,
    SmoothingPlan,
    UniformStream,
    UpdateCacheState,
    generate_batch,
    label_of,
    plan_smoothing,
    update_cache_apply,
)

KEYS4 = ["a", "b", "c", "d"]

weights = st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=1, max_size=60).filter(
    lambda w: sum(w) > 1e-6)


def rational_share(plan: SmoothingPlan, rep: Replica) -> Fraction:
    """Per-slot probability of ``rep`` recomputed in exact arithmetic."""
    n = plan.n
    if rep.is_dummy:
        fake = Fraction(1, n)
    else:
        p = Fraction(plan.dist.probs[rep.key])
        fake = Fraction(1, n) - p / plan.replica_count[rep.key]
    total_fake = sum(
        (Fraction(1, n) if r.is_dummy else Fraction(1, n) - Fraction(plan.dist.probs[r.key]) / plan.replica_count[r.key])
        for r in plan.replicas)
    real = Fraction(0) if rep.is_dummy else Fraction(plan.dist.probs[rep.key]) / plan.replica_count[rep.key]
    return real / 2 + (fake / total_fake) / 2


def test_uniform_four_keys():
    plan = plan_smoothing(AccessDistribution.uniform(KEYS4))
    assert [plan.replica_count[k] for k in KEYS4] == [1, 1, 1, 1]
    assert plan.dummy_count == 4 and plan.total_labels == 8
    for rep, fp in zip(plan.replicas, plan.fake_dist):
        assert fp == pytest.approx(0.0 if not rep.is_dummy else 0.25, abs=1e-15)


def test_skewed_four_keys_matches_hand_arithmetic():
    plan = plan_smoothing(AccessDistribution.from_weights(KEYS4, [0.7, 0.1, 0.1, 0.1]))
    assert [plan.replica_count[k] for k in KEYS4] == [3, 1, 1, 1]
    assert plan.dummy_count == 2
    expected = {"a": 0.25 - 0.7 / 3, "b": 0.15, "c": 0.15, "d": 0.15, DUMMY_KEY: 0.25}
    for rep, fp in zip(plan.replicas, plan.fake_dist):
        assert fp == pytest.approx(expected[rep.key], abs=1e-12)
        assert 0.5 * plan.dist.probs.get(rep.key, 0.0) / plan.count(rep.key) * (not rep.is_dummy) + 0.5 * fp == \
            pytest.approx(1 / 8, abs=1e-12)
    assert plan.fake_dist.sum() == pytest.approx(1.0, abs=1e-12)


@given(weights)
def test_counts_always_total_2n(w):
    keys = [f"k{i}" for i in range(len(w))]
    plan = plan_smoothing(AccessDistribution.from_weights(keys, w))
    n = len(keys)
    assert sum(plan.replica_count.values()) + plan.dummy_count == 2 * n
    assert plan.total_labels == 2 * n
    assert all(plan.replica_count[k] == max(1, math.ceil(n * plan.dist.probs[k] - 1e-9)) for k in keys)


@given(weights)
def test_every_replica_has_equal_share(w):
    keys = [f"k{i}" for i in range(len(w))]
    plan = plan_smoothing(AccessDistribution.from_weights(keys, w))
    n = plan.n
    assert (plan.fake_dist >= 0).all()
    assert plan.fake_dist.sum() == pytest.approx(1.0, abs=1e-9)
    for rep, fp in zip(plan.replicas, plan.fake_dist):
        real = 0.0 if rep.is_dummy else plan.dist.probs[rep.key] / plan.replica_count[rep.key]
        assert 0.5 * real + 0.5 * fp == pytest.approx(1 / (2 * n), abs=1e-12)


def test_share_identity_in_exact_arithmetic():
    plan = plan_smoothing(AccessDistribution.from_weights(KEYS4, [0.7, 0.1, 0.1, 0.1]))
    for rep in plan.replicas:
        assert abs(rational_share(plan, rep) - Fraction(1, 8)) < Fraction(1, 10 ** 12)


def test_rejects_bad_distributions():
    with pytest.raises(InvalidDistribution):
        AccessDistribution({"a": 0.5, "b": 0.4})
    with pytest.raises(InvalidDistribution):
        AccessDistribution({"a": 1.5, "b": -0.5})
    with pytest.raises(InvalidDistribution):
        AccessDistribution({})
    with pytest.raises(ValueError):
        plan_smoothing(AccessDistribution.uniform(KEYS4), batch_size=0)


def test_plan_json_round_trip():
    plan = plan_smoothing(AccessDistribution.from_weights(KEYS4, [0.7, 0.1, 0.1, 0.1]))
    back = SmoothingPlan.from_json(plan.to_json())
    assert back.replicas == plan.replicas
    np.testing.assert_allclose(back.fake_dist, plan.fake_dist)


def test_empty_queue_gives_fake_batch():
    plan = plan_smoothing(AccessDistribution.uniform(KEYS4))
    slots = generate_batch(deque(), plan, np.random.default_rng(0))
    assert len(slots) == 3 and all(s.kind == OpKind.FAKE for s in slots)


def test_real_slots_pop_queue_in_order():
    plan = plan_smoothing(AccessDistribution.from_weights(KEYS4, [0.7, 0.1, 0.1, 0.1]))
    queue = deque(ClientOp(k, OpKind.READ) for k in "abcdabcd")
    rng = np.random.default_rng(1)
    served = []
    for _ in range(20):
        served += [s.op.key for s in generate_batch(queue, plan, rng) if s.op is not None]
    assert "".join(served) == "abcdabcd"


def test_real_requests_spread_over_replicas():
    plan = plan_smoothing(AccessDistribution.from_weights(KEYS4, [0.7, 0.1, 0.1, 0.1]))
    rng = np.random.default_rng(2)
    hits = np.zeros(3)
    for _ in range(3000):
        for s in generate_batch(deque([ClientOp("a", OpKind.READ)]), plan, rng, real_prob=1.0)[:1]:
            hits[s.replica.index - 1] += 1
    assert stats.chisquare(hits).pvalue > 0.001


def test_uniform_stream_is_block_size_independent():
    a = UniformStream(np.random.default_rng(9), block=7)
    b = UniformStream(np.random.default_rng(9), block=1000)
    assert [a.next() for _ in range(50)] == [b.next() for _ in range(50)]


def test_label_frequencies_are_uniform_over_100k_batches():
    n = 50
    keys = [f"k{i}" for i in range(n)]
    w = 1.0 / np.arange(1, n + 1) ** 0.99
    plan = plan_smoothing(AccessDistribution.from_weights(keys, w))
    rng = UniformStream(np.random.default_rng(3))
    key_rng = np.random.default_rng(4)
    idx = {rep: i for i, rep in enumerate(plan.replicas)}
    counts = np.zeros(2 * n)
    queue = deque()
    draws = key_rng.choice(n, size=100_000, p=plan.dist.vector())
    for d in draws.tolist():
        queue.append(ClientOp(keys[d], OpKind.READ))
        for s in generate_batch(queue, plan, rng):
            counts[idx[s.replica]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_update_cache_write_then_fake_propagation():
    counts = {"a": 2}
    state = UpdateCacheState()
    assert update_cache_apply(state, Replica("a", 1), OpKind.WRITE, b"v1", counts) == b"v1"
    assert state.pending == {"a": (b"v1", {2})}
    assert update_cache_apply(state, Replica("a", 2), OpKind.FAKE, None, counts) == b"v1"
    assert state.pending == {}
    assert update_cache_apply(state, Replica("a", 2), OpKind.READ, None, counts) is None


def test_update_cache_rejects_dummy_write():
    with pytest.raises(DummyWriteError):
        update_cache_apply(UpdateCacheState(), Replica(DUMMY_KEY, 1), OpKind.WRITE, b"x", {DUMMY_KEY: 1})


@given(st.lists(st.tuples(st.sampled_from("ab"), st.integers(1, 3), st.sampled_from([OpKind.READ, OpKind.WRITE, OpKind.FAKE])),
                max_size=60))
def test_update_cache_converges(accesses):
    """Replay accesses against a model store: once a key leaves the buffer all
    of its replicas hold the latest written value, and reads always see it."""
    counts = {"a": 3, "b": 2}
    store = {(k, j): b"init" for k, r in counts.items() for j in range(1, r + 1)}
    latest = {k: b"init" for k in counts}
    state = UpdateCacheState()
    for step, (key, j, kind) in enumerate(accesses):
        j = min(j, counts[key])
        value = f"{key}{step}".encode() if kind == OpKind.WRITE else None
        out = update_cache_apply(state, Replica(key, j), kind, value, counts)
        seen = store[(key, j)] if out is None else out
        if kind == OpKind.READ:
            assert seen == latest[key]
        store[(key, j)] = seen
        if kind == OpKind.WRITE:
            latest[key] = value
        for k in counts:
            stale = state.stale(k)
            assert stale <= set(range(1, counts[k] + 1))
            assert (k in state.pending) == bool(stale)
            fresh = [store[(k, i)] for i in range(1, counts[k] + 1) if i not in stale]
            assert all(v == latest[k] for v in fresh)


def test_labels_are_deterministic_and_distinct():
    crypto = CryptoSuite.from_seed(5)
    keys = [f"k{i}" for i in range(1000)]
    plan = plan_smoothing(AccessDistribution.from_weights(keys, 1.0 / np.arange(1, 1001)))
    labels = plan.labels(crypto)
    assert len(labels) == 2000 and len(set(labels)) == 2000
    assert {len(l) for l in labels} == {crypto.label_size}
    assert label_of(Replica("k0", 1), crypto) == label_of(Replica("k0", 1), crypto)
