"""Healthy-run reference, content-oblivious interleaving and the failure
transform."""

import os

import numpy as np
from hypothesis import given, strategies as st

from shortstack.cluster import FailureEvent, FailureInjection
from shortstack.hashing import HashRing
from shortstack.sim.reference import (
    Access,
    beta_from_issues,
    interleave,
    label_counts,
    process_reference,
    transform_reference,
)
from shortstack.sim.scenario import ScenarioConfig, run_scenario
from shortstack.workload import WorkloadSpec

SERVERS = ["L3.0", "L3.1", "L3.2"]
RING = HashRing(SERVERS)
LABELS = [os.urandom(16) for _ in range(60)]


def healthy_beta(seed=0, batches=100):
    rng = np.random.default_rng(seed)
    stream = [[(int(c), LABELS[int(i)]) for c, i in zip(rng.integers(0, 2, 3), rng.integers(0, 60, 3))]
              for _ in range(batches)]
    return process_reference(stream, RING, np.random.default_rng(seed + 1), service=10)


def test_reference_routes_to_ring_owner():
    beta = healthy_beta()
    assert sum(len(v) for v in beta.values()) == 300
    for server, seq in beta.items():
        assert all(RING.owner(a.label) == server for a in seq)
        assert [a.tick for a in seq] == [10 * i for i in range(len(seq))]


@given(st.lists(st.integers(0, 6), min_size=1, max_size=5), st.integers(0, 2 ** 32))
def test_interleave_depends_only_on_lengths(lengths, seed):
    a = [[("a", q, i) for i in range(n)] for q, n in enumerate(lengths)]
    b = [[("b", q, -i) for i in range(n)] for q, n in enumerate(lengths)]
    ma = interleave(a, np.random.default_rng(seed))
    mb = interleave(b, np.random.default_rng(seed))
    assert [x[1] for x in ma] == [x[1] for x in mb]
    for q, n in enumerate(lengths):
        assert [x[2] for x in ma if x[1] == q] == list(range(n))


def test_no_events_returns_input():
    beta = healthy_beta()
    assert transform_reference(beta, [], SERVERS, RING, np.random.default_rng(0)) == beta


def test_zero_gamma_moves_only_the_unsent_suffix():
    beta = healthy_beta()
    dead = beta["L3.1"]
    t = dead[len(dead) // 2].tick
    tau = transform_reference(beta, [FailureEvent("L3.1", t, 0, 500)], SERVERS, RING, np.random.default_rng(0))
    assert tau["L3.1"] == [a for a in dead if a.tick <= t]
    moved = [a for a in dead if a.tick > t]
    extra = [a for s in ("L3.0", "L3.2") for a in tau[s] if a not in beta[s]]
    assert sorted(a.label for a in extra) == sorted(a.label for a in moved)
    assert {a.tick for a in extra} == {t + 500}
    survivor = RING.without("L3.1")
    assert all(survivor.owner(a.label) == s for s in ("L3.0", "L3.2") for a in tau[s])


def test_gamma_resends_unacknowledged_window():
    beta = healthy_beta()
    dead = beta["L3.1"]
    t = dead[len(dead) // 2].tick
    tau = transform_reference(beta, [FailureEvent("L3.1", t, 50, 10)], SERVERS, RING, np.random.default_rng(0))
    counts = label_counts(tau)
    base = label_counts(beta)
    dup = [a.label for a in dead if t - 50 < a.tick <= t]
    for lbl in set(base):
        assert counts[lbl] == base[lbl] + dup.count(lbl)


def test_proxy_events_leave_store_traffic_alone():
    beta = healthy_beta()
    assert transform_reference(beta, [FailureEvent("L2.0.1", 100, 0, 5)], SERVERS, RING,
                               np.random.default_rng(0)) == beta


def test_transform_matches_simulator_on_small_instance():
    cfg = ScenarioConfig(workload=WorkloadSpec(n=16, q=200), f=1, l3_servers=3, arrival_gap=50)
    base = run_scenario(cfg, 2)
    fail = run_scenario(cfg, 2, [FailureInjection("L3.1", 4194, 400, 300)])
    servers = base.cluster.topo.l3_servers
    beta = beta_from_issues(base.audit.issues, servers)
    assert label_counts(beta) == base.transcript.access_counts()
    tau = transform_reference(beta, fail.audit.failures, servers, base.cluster.initial_ring, np.random.default_rng(0))
    assert label_counts(tau) == fail.transcript.access_counts()


def test_access_is_hashable():
    assert len({Access(1, b"x"), Access(1, b"x")}) == 1
