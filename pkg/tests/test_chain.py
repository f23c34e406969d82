"""Chain buffers, dedup ledgers, failover and staggered placement."""

import itertools
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from shortstack.chain import (
    ACCEPT,
    DISCARD,
    DONE,
    ChainBuffer,
    ChainConfig,
    ChainUnavailable,
    DedupLedger,
    stagger_packing,
)


def test_ledger_dispositions():
    led = DedupLedger()
    assert led.ingest("s") == ACCEPT
    assert led.ingest("s") == DISCARD
    led.complete("s")
    assert led.ingest("s") == DONE and led.is_done("s") and len(led) == 1


def test_hundred_duplicates_one_effect():
    led, effects = DedupLedger(), Counter()
    for _ in range(100):
        if led.ingest(7) == ACCEPT:
            effects[7] += 1
    assert effects == {7: 1}


def test_buffer_keeps_order_and_evicts_on_ack():
    buf = ChainBuffer()
    for s in range(5):
        buf.add(s, f"e{s}")
    assert buf.ack(2) == "e2" and buf.ack(2) is None
    assert buf.seqs() == [0, 1, 3, 4] and 3 in buf and len(buf) == 4


@pytest.mark.parametrize("victim, role, pred, succ", [
    ("r0", "head", None, "r1"), ("r1", "middle", "r0", "r2"), ("r2", "tail", "r1", None)])
def test_failover_roles(victim, role, pred, succ):
    cfg = ChainConfig(0, ["r0", "r1", "r2"])
    change = cfg.failover(victim)
    assert (change.role, change.predecessor, change.successor) == (role, pred, succ)
    assert victim not in cfg.replicas and cfg.version == 1


def test_last_replica_loss_is_unavailable():
    cfg = ChainConfig(0, ["r0"])
    assert cfg.head == cfg.tail == "r0"
    with pytest.raises(ChainUnavailable):
        cfg.failover("r0")


class ChainModel:
    """Synchronous model of one chain feeding a deduplicating receiver.

    Entries propagate head to tail one hop per step; the tail emits to the
    receiver; acks flow back and evict buffers. Used as an exactly-once
    oracle for buffer plus ledger behaviour under replica kills.
    """

    def __init__(self, f):
        self.cfg = ChainConfig(0, [f"r{i}" for i in range(f + 1)])
        self.buffers = {r: ChainBuffer() for r in self.cfg.replicas}
        self.ledger = DedupLedger()
        self.effects = Counter()

    def submit(self, seq):
        for r in self.cfg.replicas:  # propagate
            self.buffers[r].add(seq, seq)
        self.emit(seq)

    def emit(self, seq):
        if self.ledger.ingest(seq) == ACCEPT:
            self.effects[seq] += 1
            self.ledger.complete(seq)

    def ack_all(self):
        for r in self.cfg.replicas:
            for s in self.buffers[r].seqs():
                self.buffers[r].ack(s)

    def kill(self, r):
        change = self.cfg.failover(r)
        if change.role == "tail":
            for s, _ in self.buffers[self.cfg.tail]:  # new tail re-emits unacked entries
                self.emit(s)


@given(st.integers(1, 2), st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=40), st.data())
def test_exactly_once_under_kills(f, steps, data):
    m = ChainModel(f)
    seq = itertools.count()
    kills = 0
    for burst, do_ack in steps:
        for _ in range(burst):
            m.submit(next(seq))
        if do_ack:
            m.ack_all()
        if kills < f and data.draw(st.booleans()):
            m.kill(data.draw(st.sampled_from(m.cfg.replicas)))
            kills += 1
    total = next(seq)
    assert all(m.effects[s] == 1 for s in range(total))


@pytest.mark.parametrize("k, f", [(3, 2), (4, 1), (5, 2)])
def test_stagger_packing(k, f):
    placement = stagger_packing(k, f)
    assert all(len(v) == 2 * f + 3 for v in placement.values())
    where = {inst: p for p, insts in placement.items() for inst in insts}
    chains = {}
    for inst, p in where.items():
        if not inst.startswith("L3"):
            chains.setdefault(inst.rsplit(".", 1)[0], set()).add(p)
    for dead in itertools.combinations(range(k), f):
        assert all(hosts - set(dead) for hosts in chains.values())
    assert all(len(h) == f + 1 for h in chains.values())
    with pytest.raises(ValueError):
        stagger_packing(2, 2)
