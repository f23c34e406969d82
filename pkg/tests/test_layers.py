"""L1 batching, L2 write buffering, L3 weights and the weighted scheduler."""

import itertools
import json
from collections import Counter, deque

import numpy as np
import pytest

from shortstack.crypto import CryptoSuite
from shortstack.hashing import HashRing, PlaintextRouter
from shortstack.layers import (
    Generation,
    LayerTopology,
    ProtocolFault,
    Request,
    UnknownKey,
    WeightedScheduler,
    check_known_key,
    compute_weights,
    decode_message,
    encode_message,
    l1_process_request,
    l2_process,
    route_key,
)
from shortstack.pancake import DUMMY_KEY, ClientOp, OpKind, Replica, UpdateCacheState, plan_smoothing
from shortstack.workload import zipf_distribution


class TableRouter:
    """Router with an explicit key -> chain table."""

    def __init__(self, table, default=0):
        self.table, self.default = table, default

    def route(self, key):
        return self.table.get(key, self.default)


@pytest.fixture(scope="module")
def gen():
    plan = plan_smoothing(zipf_distribution(50, 0.99))
    return Generation.initial(plan, CryptoSuite.from_seed(0, value_size=64))


def run_l1(gen, router, ops, rng):
    seq = itertools.count()
    queue = deque(ops)
    out = []
    while queue:
        out += l1_process_request(queue, gen, router, rng, lambda: ("L1.0", next(seq)), len(out))
    return out


def test_each_request_routed_by_its_own_key(gen):
    router = PlaintextRouter([0, 1, 2, 3])
    ops = [ClientOp(k, OpKind.READ) for k in np.random.default_rng(0).choice(gen.sampler.dist.keys, 10_000)]
    routed = run_l1(gen, router, ops, np.random.default_rng(1))
    assert len(routed) % 3 == 0
    assert all(chain == router.route(route_key(req.replica)) for chain, req in routed)
    assert all(req.label == gen.label_map[req.replica] for _, req in routed)
    assert len({chain for chain, _ in routed}) == 4


def test_single_chain_gets_everything(gen):
    routed = run_l1(gen, PlaintextRouter([7]), [ClientOp("k0000000", OpKind.READ)], np.random.default_rng(2))
    assert {c for c, _ in routed} == {7}
    assert len(routed) % 3 == 0


def test_batch_members_share_batch_id(gen):
    queue = deque([ClientOp("k0000001", OpKind.WRITE, b"v")])
    seq = itertools.count()
    out = l1_process_request(queue, gen, PlaintextRouter([0, 1]), np.random.default_rng(3), lambda: next(seq), 42)
    assert len(out) == 3 and {r.batch_id for _, r in out} == {42}
    assert len({r.seq for _, r in out}) == 3


def test_unknown_key_rejected(gen):
    with pytest.raises(UnknownKey):
        check_known_key("nope", gen)
    with pytest.raises(UnknownKey):
        check_known_key(DUMMY_KEY, gen)


def test_l2_serves_cached_value_to_stale_replica(gen):
    key = gen.sampler.dist.keys[0]
    assert gen.sampler.replica_count[key] >= 2
    router = TableRouter({})
    cache = UpdateCacheState()
    w = Request(1, 1, Replica(key, 1), gen.label_map[Replica(key, 1)], OpKind.WRITE, b"new")
    assert l2_process(w, cache, gen, 0, router).write_value == b"new"
    r = Request(2, 2, Replica(key, 2), gen.label_map[Replica(key, 2)], OpKind.READ)
    out = l2_process(r, cache, gen, 0, router)
    assert out.write_value == b"new" and out.reply_value == b"new"
    f = Request(3, 3, Replica(key, 2), gen.label_map[Replica(key, 2)], OpKind.FAKE)
    assert l2_process(f, cache, gen, 0, router).write_value is None


def test_l2_rejects_foreign_keys(gen):
    key = gen.sampler.dist.keys[0]
    req = Request(1, 1, Replica(key, 1), gen.label_map[Replica(key, 1)], OpKind.READ)
    with pytest.raises(ProtocolFault):
        l2_process(req, UpdateCacheState(), gen, 1, TableRouter({key: 0}))


def test_weights_three_two_one():
    label_map = {Replica("a", j): f"a{j}".encode() for j in (1, 2, 3)}
    label_map.update({Replica("b", j): f"b{j}".encode() for j in (1, 2)})
    label_map[Replica("c", 1)] = b"c1"
    w = compute_weights(label_map, TableRouter({"a": 0, "b": 1, "c": 2}), HashRing(["L3.0"]))
    assert w == {"L3.0": pytest.approx({0: 1 / 2, 1: 1 / 3, 2: 1 / 6})}


def test_one_l2_one_l3(gen):
    w = compute_weights(gen.label_map, PlaintextRouter([0]), HashRing(["L3.0"]))
    assert w == {"L3.0": {0: 1.0}}


def test_weights_match_label_census(gen):
    topo = LayerTopology([0], [0, 1, 2, 3], ["L3.0", "L3.1", "L3.2", "L3.3"], f=1)
    ring = topo.ring()
    w = compute_weights(gen.label_map, topo.router, ring)
    census = Counter((ring.owner(l), topo.router.route(route_key(r))) for r, l in gen.label_map.items())
    for server in ring.servers:
        total = sum(v for (s, _), v in census.items() if s == server)
        for (s, chain), v in census.items():
            if s == server:
                assert w[server][chain] == pytest.approx(v / total, abs=1e-15)
        assert sum(w[server].values()) == pytest.approx(1.0)


def test_topology_needs_f_plus_one_l3():
    with pytest.raises(ValueError):
        LayerTopology([0], [0], ["L3.0"], f=1)


def test_scheduler_converges_to_weights():
    delta = {0: 0.5, 1: 1 / 3, 2: 1 / 6}
    sched = WeightedScheduler(delta)
    u = np.random.default_rng(4).random(100_000)
    picks = Counter(sched.pick([0, 1, 2], x) for x in u.tolist())
    for c, d in delta.items():
        assert abs(picks[c] / 100_000 - d) < 0.01


def test_scheduler_renormalizes_over_nonempty_queues():
    sched = WeightedScheduler({0: 0.5, 1: 0.25, 2: 0.25})
    u = np.random.default_rng(5).random(20_000)
    picks = Counter(sched.pick([1, 2], x) for x in u.tolist())
    assert abs(picks[1] / 20_000 - 0.5) < 0.02
    assert sched.pick([5], 0.3) == 5
    assert WeightedScheduler({}).pick([3, 4], 0.9) == 4


def test_request_wire_round_trip(gen):
    req = Request(("L1.0", 9), 4, Replica("k0000003", 1), b"\x01" * 16, OpKind.WRITE, b"val", ("c", 1), None, 2)
    req.write_value = b"val"
    back = Request.from_wire(json.loads(json.dumps(req.to_wire())))
    assert back.to_wire() == req.to_wire()
    kind, body = decode_message(encode_message("request", req.to_wire()))
    assert kind == "request" and body["seq"] == ["L1.0", 9]
    with pytest.raises(ValueError):
        encode_message("gossip", {})
    with pytest.raises(ValueError):
        decode_message(json.dumps({"v": 99, "type": "ack", "body": {}}))
