"""Change detection, swap planning and transition bookkeeping."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from shortstack.crypto import CryptoSuite
from shortstack.dist_change import (
    PHASE_COMMIT,
    PHASE_IDLE,
    PHASE_PREPARE,
    DistributionMonitor,
    TransitionError,
    TransitionState,
    build_swap_plan,
    detect_change,
    label_share,
    observe_key,
    pooled_chi_square,
)
from shortstack.layers import Generation
from shortstack.pancake import AccessDistribution, plan_smoothing
from shortstack.workload import key_name, zipf_probs

N = 200
KEYS = [key_name(i) for i in range(N)]


def test_pooled_test_matches_scipy_without_pooling():
    rng = np.random.default_rng(0)
    probs = 0.5 / 20 + 0.5 * rng.dirichlet(np.ones(20))  # every cell expects >= 500
    counts = rng.multinomial(20_000, probs)
    stat, p = pooled_chi_square(counts, probs)
    ref = stats.chisquare(counts, probs * counts.sum())
    assert stat == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue)


def test_pooled_test_merges_small_cells():
    probs = np.array([0.9] + [0.1 / 50] * 50)
    counts = np.array([90] + [0] * 40 + [1] * 10)
    stat, p = pooled_chi_square(counts, probs)
    assert np.isfinite(stat) and 0.0 <= p <= 1.0
    assert pooled_chi_square(np.zeros(3), np.ones(3) / 3) == (0.0, 1.0)


def feed(monitor, stream):
    for i, k in enumerate(stream):
        if observe_key(monitor, KEYS[k]) is not None:
            return i + 1
    return None


def test_matching_stream_never_triggers():
    p = zipf_probs(N, 0.0)
    mon = DistributionMonitor(KEYS, p, window=10_000, alpha=1e-3)
    assert feed(mon, np.random.default_rng(1).choice(N, size=1_000_000, p=p).tolist()) is None
    assert mon.tests_run == 100


def test_shift_detected_within_five_windows():
    mon = DistributionMonitor(KEYS, zipf_probs(N, 0.99), window=10_000, alpha=1e-3)
    hit = feed(mon, np.random.default_rng(2).integers(0, N, size=50_000).tolist())
    assert hit is not None and hit <= 50_000
    assert mon.candidate.sum() == pytest.approx(1.0) and (mon.candidate > 0).all()


def test_partial_window_never_triggers():
    mon = DistributionMonitor(KEYS, zipf_probs(N, 0.99), window=100)
    assert detect_change(mon) is None
    for _ in range(99):
        assert observe_key(mon, KEYS[-1]) is None


dists = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=N, max_size=N).filter(lambda w: sum(w) > 1e-3)


def swap_case(skew_old, new_weights, seed=0):
    crypto = CryptoSuite.from_seed(seed, value_size=32)
    old = plan_smoothing(AccessDistribution.from_weights(KEYS, zipf_probs(N, skew_old)))
    gen0 = Generation.initial(old, crypto)
    plan = build_swap_plan(old, AccessDistribution.from_weights(KEYS, new_weights), gen0.label_map)
    return gen0, plan


@given(st.sampled_from([0.0, 0.5, 0.99, 1.5]), dists)
def test_swap_keeps_labels_and_smoothness(skew_old, w):
    gen0, plan = swap_case(skew_old, w)
    swap, final = plan.swap_generation(1), plan.final_generation(2)
    base = set(gen0.labels)
    for g in (swap, final):
        assert len(g.label_map) == 2 * N and set(g.labels) == base
        shares = np.array(list(label_share(g).values()))
        np.testing.assert_allclose(shares, 1 / (2 * N), atol=1e-12)
    assert 0 < plan.real_prob <= 0.5
    assert len(plan.gains) == len(plan.losses)
    assert all(plan.read_counts[k] <= min(plan.old_plan.replica_count[k], plan.new_plan.replica_count[k])
               for k in KEYS)


def test_reversed_zipf_swap_moves_replicas():
    gen0, plan = swap_case(0.99, zipf_probs(N, 0.99)[::-1])
    assert plan.pairs and plan.real_prob < 0.5
    lost = {plan.label_map[g] for g in plan.gains}
    assert lost == {gen0.label_map[l] for l in plan.losses}
    assert '"label_map"' in plan.to_json()


def test_transition_phases():
    st_ = TransitionState()
    st_.advance(PHASE_PREPARE)
    st_.prepare_acks.add("L2.0")
    st_.advance(PHASE_COMMIT)
    st_.advance(PHASE_IDLE)
    assert st_.history == [PHASE_IDLE, PHASE_PREPARE, PHASE_COMMIT, PHASE_IDLE]
    with pytest.raises(TransitionError):
        st_.advance(PHASE_COMMIT)
