"""Simulated processes: clients, L1/L2 chain replicas, L3 servers, the KV
store, the master and the distribution-change leader.

Every node keeps its own copy of the membership, updated only by the
master's epoch notifications, and resolves roles against it. Messages are
fenced by epoch (see :class:`Node`), so a receiver never acts on a message
from a view newer than its own. Recovery actions (re-emission, resends,
replay) run when a node applies the notification.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Set, Tuple

from ..chain import ACCEPT, DONE, ChainBuffer, DedupLedger
from ..cluster import (
    MODE_KILL,
    FailureEvent,
    FailureInjection,
    MembershipChange,
    heartbeat_detection_tick,
    shuffled_replay_order,
)
from ..dist_change import (
    PHASE_COMMIT,
    PHASE_IDLE,
    PHASE_PREPARE,
    DistributionMonitor,
    TransitionState,
    build_swap_plan,
    observe_key,
)
from ..layers import Request, UnknownKey, WeightedScheduler, check_known_key, compute_weights, l1_process_request
from ..pancake import AccessDistribution, ClientOp, OpKind, UpdateCacheState, update_cache_apply
from .engine import Node

log = logging.getLogger(__name__)

OK = b"OK"


# ---------------------------------------------------------------------------
# Audit records (trusted-domain only)


@dataclass
class OpRecord:
    client: int
    op_id: Tuple[int, int]
    kind: str
    key: str
    value: Optional[bytes]
    invoke: int
    response: Optional[int] = None
    result: Optional[bytes] = None
    error: Optional[str] = None


@dataclass
class Audit:
    batches: Dict[Any, Tuple[int, int, int, int]] = field(default_factory=dict)  # id -> (chain, gen, size, tick)
    issues: List[Tuple[int, str, tuple, Any, int, bytes, int]] = field(default_factory=list)
    receipts: List[Tuple[int, int, Any]] = field(default_factory=list)  # (tick, l2 chain, batch id) at L3
    arrivals: List[Tuple[int, str, tuple, Any, int]] = field(default_factory=list)
    history: List[OpRecord] = field(default_factory=list)
    failures: List[FailureEvent] = field(default_factory=list)
    epochs: List[Tuple[int, MembershipChange]] = field(default_factory=list)
    protocol: List[Tuple[int, str, Any]] = field(default_factory=list)
    l2_generation_faults: List[str] = field(default_factory=list)
    replays: List[Tuple[int, str, int]] = field(default_factory=list)
    completions: List[int] = field(default_factory=list)
    queue_samples: List[Tuple[int, int, int, int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Clients


class ClientPool(Node):
    """All clients behind one network endpoint.

    Open-loop mode issues operation ``i`` at ``arrivals[i]`` regardless of
    progress; closed-loop mode keeps ``clients`` operations in flight.
    """

    def __init__(self, cl, ops: List[Tuple[str, str]], arrivals: Optional[List[int]], clients: int,
                 timeout: Optional[int]):
        super().__init__("clients", cl.sim, cl.net)
        self.cl = cl
        self.view = cl.view.copy()
        self.fenced = True
        self.ops = ops
        self.arrivals = arrivals
        self.clients = clients
        self.timeout = timeout
        self.route = cl.sim.uniform_stream("clients/route")
        self.next_op = 0
        self.counters = [0] * clients
        self.outstanding: Dict[Tuple[int, int], Tuple[int, OpRecord, ClientOp]] = {}
        self.done = 0

    def start(self) -> None:
        if self.arrivals is not None:
            if self.ops:
                self.sim.at(self.arrivals[0], self._arrive, None)
        else:
            for c in range(min(self.clients, len(self.ops))):
                self.sim.at(c, self._issue_for, c)

    def _arrive(self, _) -> None:
        i = self.next_op
        self._issue(i % self.clients)
        if self.next_op < len(self.ops):
            self.sim.at(self.arrivals[self.next_op], self._arrive, None)

    def _issue_for(self, client: int) -> None:
        if self.next_op < len(self.ops):
            self._issue(client)

    def _issue(self, client: int) -> None:
        i = self.next_op
        self.next_op += 1
        kind, key = self.ops[i]
        op_id = (client, self.counters[client])
        self.counters[client] += 1
        value = f"c{client}.{op_id[1]}".encode() if kind == OpKind.WRITE else None
        rec = OpRecord(client, op_id, kind, key, value, self.sim.now)
        self.cl.audit.history.append(rec)
        op = ClientOp(key, kind, value, self, op_id)
        chain = self.cl.l1_ids[min(int(self.route.next() * len(self.cl.l1_ids)), len(self.cl.l1_ids) - 1)]
        self.outstanding[op_id] = (chain, rec, op)
        self._send(chain, op)
        if self.timeout:
            self.sim.at(self.sim.now + self.timeout, self._check_timeout, op_id)

    def _send(self, chain: int, op: ClientOp) -> None:
        head = self.cl.node(self.view.l1[chain].head)
        self.net.send(self, head, head.on_client_request, op, "client")

    def _check_timeout(self, op_id) -> None:
        entry = self.outstanding.get(op_id)
        if entry is None:
            return
        self._send(entry[0], entry[2])
        self.sim.at(self.sim.now + self.timeout, self._check_timeout, op_id)

    def on_reply(self, msg) -> None:
        op_id, result, error = msg
        entry = self.outstanding.pop(op_id, None)
        if entry is None:
            return  # duplicate reply from a replayed request
        rec = entry[1]
        rec.response = self.sim.now
        rec.result = result
        rec.error = error
        self.done += 1
        self.cl.audit.completions.append(self.sim.now)
        if self.arrivals is None:
            self._issue_for(op_id[0])

    def on_epoch(self, change: MembershipChange) -> None:
        self.view.apply(change)
        self.epoch = change.epoch  # resends must be fenced under the new view
        if change.layer == "L1":
            chain = change.chain_change.chain_id
            for chain_id, _, op in list(self.outstanding.values()):
                if chain_id == chain:
                    self._send(chain, op)
        self.advance_epoch(change.epoch)


# ---------------------------------------------------------------------------
# Chain entries


class Entry:
    __slots__ = ("seq", "kind", "payload", "gen")

    def __init__(self, seq, kind, payload=None, gen=0):
        self.seq = seq
        self.kind = kind
        self.payload = payload
        self.gen = gen


class _ChainMember(Node):
    layer = ""

    def __init__(self, cl, chain: int, idx: int, cost: int):
        super().__init__(f"{self.layer}.{chain}.{idx}", cl.sim, cl.net, cost)
        self.cl = cl
        self.chain = chain
        self.idx = idx
        self.view = cl.view.copy()
        self.fenced = True
        self.cfg = self.view.chain(self.layer, chain)
        self.buffer = ChainBuffer()
        self.ledger = DedupLedger()

    # role helpers against the master's view
    def is_head(self) -> bool:
        r = self.cfg.replicas
        return bool(r) and r[0] == self.name

    def is_tail(self) -> bool:
        r = self.cfg.replicas
        return bool(r) and r[-1] == self.name

    def pred(self) -> Optional[Node]:
        if self.name not in self.cfg.replicas:
            return None
        p = self.cfg.predecessor(self.name)
        return None if p is None else self.cl.node(p)

    def succ(self) -> Optional[Node]:
        if self.name not in self.cfg.replicas:
            return None
        s = self.cfg.successor(self.name)
        return None if s is None else self.cl.node(s)

    def halt(self) -> None:
        log.debug("%s halts at %d", self.name, self.sim.now)
        self.kill()


# ---------------------------------------------------------------------------
# L1


class L1Replica(_ChainMember):
    layer = "L1"

    def __init__(self, cl, chain: int, idx: int):
        super().__init__(cl, chain, idx, cl.config.l1_cost)
        self.known_ops: Set[Tuple[int, int]] = set()
        self.pending: Deque[ClientOp] = deque()
        self.queued: Set[Tuple[int, int]] = set()
        self.owed = 0
        self.counter = 0
        self.batch_rng = cl.sim.uniform_stream(f"batch/{self.name}")
        self.cur_gen = 0
        self.prepared = 0
        self.committed = 0
        self.acks: Dict[tuple, Set[tuple]] = {}
        self.prep_acked: Set[int] = set()
        self.flush_timer = False

    @property
    def paused(self) -> bool:
        return self.prepared > self.committed

    # -- client side -------------------------------------------------------
    def on_client_request(self, op: ClientOp) -> None:
        if self.dead or not self.is_head():
            return
        depart = self.depart()
        if op.op_id in self.known_ops or op.op_id in self.queued:
            return
        try:
            check_known_key(op.key, self.cl.gens[self.cur_gen])
        except UnknownKey:
            self.net.send(self, op.client, op.client.on_reply, (op.op_id, None, "unknown key"), "client", depart)
            return
        self.queued.add(op.op_id)
        self.pending.append(op)
        leader = self.cl.leader
        if leader.monitor is not None:
            self.net.send(self, leader, leader.on_observe, op.key, "proxy", depart)
        if self.paused:
            self.owed += 1
        else:
            self._make_batch(depart)
        self._arm_flush()

    def _arm_flush(self) -> None:
        if self.cl.config.idle_flush and self.pending and not self.flush_timer:
            self.flush_timer = True
            self.sim.at(self.sim.now + self.cl.config.idle_flush, self._idle_flush, None)

    def _idle_flush(self, _) -> None:
        self.flush_timer = False
        if self.dead or not self.is_head():
            return
        if self.paused:
            return  # on_commit re-arms; a stalled transition must not keep the run alive
        if self.pending:
            self._make_batch(self.depart())
        self._arm_flush()

    def _next_seq_factory(self, bseq):
        i = iter(range(1 << 30))
        return lambda: bseq + (next(i),)

    def _make_batch(self, depart: int) -> None:
        gen = self.cl.gens[self.cur_gen]
        self.counter += 1
        bseq = (self.chain, self.idx, self.counter)
        batch_id = self.cl.next_batch_id()
        reqs = l1_process_request(self.pending, gen, self.cl.topo.router, self.batch_rng,
                                  self._next_seq_factory(bseq), batch_id)
        op_ids = [r.op_id for _, r in reqs if r.op_id is not None]
        for oid in op_ids:
            self.queued.discard(oid)
        self.cl.audit.batches[batch_id] = (self.chain, gen.number, len(reqs), self.sim.now)
        if self.cl.config.l1_unbuffered:
            # test double: no chain, requests leave one at a time
            self.known_ops.update(op_ids)
            for i, (d, req) in enumerate(reqs):
                head = self.cl.node(self.view.l2[d].head)
                self.net.send(self, head, head.on_request, req, "proxy", depart + i * self.cl.config.unbuffered_spacing)
            return
        entry = Entry(bseq, "batch", (reqs, op_ids), gen.number)
        self.ledger.ingest(bseq)
        self._apply(entry, depart)

    # -- chain ---------------------------------------------------------------
    def _apply(self, entry: Entry, depart: int) -> None:
        kind = entry.kind
        if kind == "batch":
            self.known_ops.update(entry.payload[1])
        elif kind == "prepare":
            self.prepared = max(self.prepared, entry.gen)
        elif kind == "commit":
            self.committed = max(self.committed, entry.gen)
            self.cur_gen = max(self.cur_gen, entry.gen)
        self.buffer.add(entry.seq, entry)
        if self.is_tail():
            self._emit(entry, depart)
        else:
            s = self.succ()
            if s is not None:
                self.net.send(self, s, s.on_chain_entry, (self.name, entry), "proxy", depart)

    def on_chain_entry(self, msg) -> None:
        if self.dead:
            return
        sender, entry = msg
        p = self.pred()
        if p is None or p.name != sender:
            return
        depart = self.depart()
        st = self.ledger.ingest(entry.seq)
        if st == ACCEPT:
            self._apply(entry, depart)
        elif st == DONE:
            self.net.send(self, p, p.on_batch_ack, entry.seq, "proxy", depart)

    def _emit(self, entry: Entry, depart: int) -> None:
        if entry.kind == "batch":
            self.acks.setdefault(entry.seq, set())
            view = self.view
            for d, req in entry.payload[0]:
                head = self.cl.node(view.l2[d].head)
                self.net.send(self, head, head.on_request, req, "proxy", depart)
        elif entry.kind == "prepare":
            self._send_flush_eof(entry.gen, depart)
            self._complete(entry.seq, depart)
            self._check_prepare_ack(depart)
        elif entry.kind == "commit":
            leader = self.cl.leader
            self.net.send(self, leader, leader.on_commit_ack, ("L1", self.chain, entry.gen), "proxy", depart)
            self._complete(entry.seq, depart)

    def _send_flush_eof(self, gen: int, depart: int, only: Optional[int] = None) -> None:
        view = self.view
        for d in self.cl.l2_ids:
            if only is not None and d != only:
                continue
            head = self.cl.node(view.l2[d].head)
            self.net.send(self, head, head.on_flush_eof, (gen, self.chain), "proxy", depart)

    def _complete(self, seq, depart: int) -> None:
        if self.buffer.ack(seq) is None:
            return
        self.ledger.complete(seq)
        self.acks.pop(seq, None)
        p = self.pred()
        if p is not None and not self.ack_silent:
            self.net.send(self, p, p.on_batch_ack, seq, "proxy", depart)

    def on_req_ack(self, req_seq) -> None:
        if self.dead:
            return
        bseq = req_seq[:3]
        entry = self.buffer.get(bseq)
        if entry is None:
            return
        depart = self.depart()
        got = self.acks.setdefault(bseq, set())
        got.add(req_seq)
        if len(got) == len(entry.payload[0]):
            self._complete(bseq, depart)
            self._check_prepare_ack(depart)

    def on_batch_ack(self, seq) -> None:
        if self.dead:
            return
        self._complete(seq, self.depart())

    def _check_prepare_ack(self, depart: int) -> None:
        g = self.prepared
        if not self.is_tail() or g <= self.committed or g in self.prep_acked:
            return
        for _, e in self.buffer:
            if e.kind == "batch" and e.gen < g:
                return
        self.prep_acked.add(g)
        leader = self.cl.leader
        self.net.send(self, leader, leader.on_prepare_ack, ("L1", self.chain, g), "proxy", depart)

    # -- distribution change -----------------------------------------------
    def on_prepare(self, gen: int) -> None:
        if self.dead or not self.is_head() or gen <= self.prepared:
            return
        depart = self.depart()
        self.counter += 1
        seq = (self.chain, self.idx, self.counter)
        self.ledger.ingest(seq)
        self._apply(Entry(seq, "prepare", None, gen), depart)

    def on_commit(self, gen: int) -> None:
        if self.dead or not self.is_head() or gen <= self.committed or gen > self.prepared:
            return
        depart = self.depart()
        self.counter += 1
        seq = (self.chain, self.idx, self.counter)
        self.ledger.ingest(seq)
        self._apply(Entry(seq, "commit", None, gen), depart)
        for _ in range(self.owed):
            if self.pending:
                self._make_batch(depart)
        self.owed = 0
        self._arm_flush()

    # -- membership --------------------------------------------------------
    def on_epoch(self, change: MembershipChange) -> None:
        if self.dead:
            return
        if change.server == self.name:
            self.halt()
            return
        self.view.apply(change)
        self.epoch = change.epoch  # recovery traffic must be fenced under the new view
        self._recover(change)
        self.advance_epoch(change.epoch)

    def _recover(self, change: MembershipChange) -> None:
        depart = self.depart()
        cc = change.chain_change
        if change.layer == "L1" and cc.chain_id == self.chain:
            if cc.role == "tail" and self.is_tail():
                for _, entry in self.buffer:
                    self._emit(entry, depart)
                if self.paused:
                    self._send_flush_eof(self.prepared, depart)
                self._check_prepare_ack(depart)
            elif cc.role == "middle" and cc.predecessor == self.name:
                s = self.succ()
                for _, entry in self.buffer:
                    self.net.send(self, s, s.on_chain_entry, (self.name, entry), "proxy", depart)
        elif change.layer == "L2" and cc.role == "head" and self.is_tail():
            d = cc.chain_id
            head = self.cl.node(self.view.l2[d].head)
            for seq, entry in self.buffer:
                if entry.kind != "batch":
                    continue
                got = self.acks.get(seq, ())
                for dd, req in entry.payload[0]:
                    if dd == d and req.seq not in got:
                        self.net.send(self, head, head.on_request, req, "proxy", depart)
            if self.paused and self.prepared in self.prep_acked | {self.prepared}:
                self._send_flush_eof(self.prepared, depart, only=d)


# ---------------------------------------------------------------------------
# L2


class L2Replica(_ChainMember):
    layer = "L2"

    def __init__(self, cl, chain: int, idx: int):
        super().__init__(cl, chain, idx, cl.config.l2_cost)
        self.cache = UpdateCacheState()
        self.cur_gen = 0
        self.prepared = 0
        self.committed = 0
        self.eofs: Dict[int, Set[int]] = {}
        self.prep_acked: Set[int] = set()
        self.swap_reported: Set[int] = set()
        self.unpopulated: Dict[str, Set[int]] = {}
        self.my_gained: Dict[str, Tuple[int, ...]] = {}
        self.write_version: Dict[str, int] = {}
        self.ring = cl.initial_ring
        self.moved: Set[bytes] = set()
        self.drain_token = 0
        self.replay_rng = cl.sim.rng(f"replay/{self.name}")

    # -- inputs --------------------------------------------------------------
    def on_request(self, req: Request) -> None:
        if self.dead or not self.is_head():
            return
        depart = self.depart()
        st = self.ledger.ingest(req.seq)
        if st == ACCEPT:
            self._apply(Entry(req.seq, "req", req, req.gen), depart, head=True)
        elif st == DONE:
            self._ack_l1(req.seq, depart)

    def _marker(self, seq, kind, payload, gen) -> None:
        if self.dead or not self.is_head():
            return
        depart = self.depart()
        if self.ledger.ingest(seq) == ACCEPT:
            self._apply(Entry(seq, kind, payload, gen), depart, head=True)

    def on_flush_eof(self, msg) -> None:
        gen, l1_chain = msg
        self._marker(("eof", gen, l1_chain), "eof", l1_chain, gen)

    def on_prepare(self, gen: int) -> None:
        self._marker(("prepare", gen), "prepare", None, gen)

    def on_commit(self, gen: int) -> None:
        self._marker(("commit", gen), "commit", None, gen)

    def on_learn(self, msg) -> None:
        key, value, version, lid = msg
        self._marker(("learn", lid), "learn", (key, value, version), self.cur_gen)

    def on_chain_entry(self, msg) -> None:
        if self.dead:
            return
        sender, entry = msg
        p = self.pred()
        if p is None or p.name != sender:
            return
        depart = self.depart()
        st = self.ledger.ingest(entry.seq)
        if st == ACCEPT:
            self._apply(entry, depart, head=False)
        elif st == DONE:
            self.net.send(self, p, p.on_chain_ack, entry.seq, "proxy", depart)

    # -- state machine -------------------------------------------------------
    def _switch(self, number: int) -> None:
        gen = self.cl.gens[number]
        router = self.cl.topo.router
        if not gen.final:
            for key in list(self.cache.pending):
                value, stale = self.cache.pending[key]
                keep = {j for j in stale if j <= gen.cache_counts[key]}
                keep |= set(gen.gained.get(key, ()))
                if keep:
                    self.cache.pending[key] = (value, keep)
                else:
                    del self.cache.pending[key]
            self.my_gained = {k: js for k, js in gen.gained.items() if router.route(k) == self.chain}
            self.unpopulated = {k: set(js) for k, js in self.my_gained.items() if k not in self.cache.pending}
        else:
            self.my_gained = {}
            self.unpopulated = {}
        self.cur_gen = number

    def _apply(self, entry: Entry, depart: int, head: bool) -> None:
        kind = entry.kind
        if kind == "req":
            req = entry.payload
            if req.gen > self.cur_gen:
                self._switch(req.gen)
            elif req.gen < self.cur_gen:
                self.cl.audit.l2_generation_faults.append(
                    f"{self.name}: gen {req.gen} request after switch to {self.cur_gen} ({req.seq})")
            self._process(req, head)
        elif kind == "eof":
            self.eofs.setdefault(entry.gen, set()).add(entry.payload)
        elif kind == "prepare":
            self.prepared = max(self.prepared, entry.gen)
        elif kind == "commit":
            if self.cur_gen < entry.gen:
                self._switch(entry.gen)
            self.committed = max(self.committed, entry.gen)
        elif kind == "learn":
            self._install_learned(*entry.payload)
        self.buffer.add(entry.seq, entry)
        if self.is_tail():
            self._emit(entry, depart)
        else:
            s = self.succ()
            if s is not None:
                self.net.send(self, s, s.on_chain_entry, (self.name, entry), "proxy", depart)

    def _process(self, req: Request, head: bool) -> None:
        gen = self.cl.gens[self.cur_gen]
        rep = req.replica
        key = rep.key
        kind = req.kind
        learn = None
        if not gen.final and key in self.my_gained:
            if kind == OpKind.WRITE:
                self.write_version[key] = self.write_version.get(key, 0) + 1
                self.unpopulated.pop(key, None)
            elif (self.unpopulated.get(key) and key not in self.cache.pending
                  and rep.index <= gen.real_targets(key)):
                learn = (key, self.write_version.get(key, 0))
        value = update_cache_apply(self.cache, rep, kind, req.value, gen.cache_counts)
        if head:
            req.write_value = value
            req.reply_value = value if kind == OpKind.READ else None
            req.learn = learn

    def _install_learned(self, key: str, value: bytes, version: int) -> None:
        gen = self.cl.gens[self.cur_gen]
        if gen.final or not self.unpopulated.get(key) or key in self.cache.pending:
            return
        if self.write_version.get(key, 0) != version:
            return
        self.cache.pending[key] = (value, set(self.unpopulated.pop(key)))

    def _emit(self, entry: Entry, depart: int) -> None:
        if entry.kind == "req":
            req = entry.payload
            if req.label not in self.moved:
                self._send_l3(req, depart)
        elif entry.kind == "commit":
            leader = self.cl.leader
            self.net.send(self, leader, leader.on_commit_ack, ("L2", self.chain, entry.gen), "proxy", depart)
            self._complete(entry.seq, depart)
        else:
            self._complete(entry.seq, depart)
        self._check_prepare_ack(depart)
        self._check_swap_done(depart)

    def _send_l3(self, req: Request, depart: int) -> None:
        l3 = self.cl.node(self.ring.owner(req.label))
        self.net.send(self, l3, l3.on_request, req, "proxy", depart)

    def _ack_l1(self, seq, depart: int) -> None:
        tail = self.cl.node(self.view.l1[seq[0]].tail)
        self.net.send(self, tail, tail.on_req_ack, seq, "proxy", depart)

    def _complete(self, seq, depart: int) -> None:
        entry = self.buffer.ack(seq)
        if entry is None:
            return
        self.ledger.complete(seq)
        if self.ack_silent:
            return
        p = self.pred()
        if p is not None:
            self.net.send(self, p, p.on_chain_ack, seq, "proxy", depart)
        elif entry.kind == "req":
            self._ack_l1(seq, depart)

    def on_l3_ack(self, seq) -> None:
        if self.dead:
            return
        depart = self.depart()
        self._complete(seq, depart)
        self._check_prepare_ack(depart)

    def on_chain_ack(self, seq) -> None:
        if self.dead:
            return
        self._complete(seq, self.depart())

    def _check_prepare_ack(self, depart: int) -> None:
        g = self.prepared
        if g <= self.committed or g in self.prep_acked or not self.is_tail():
            return
        if not set(self.cl.l1_ids) <= self.eofs.get(g, set()):
            return
        for _, e in self.buffer:
            if e.kind == "req" and e.gen < g:
                return
        self.prep_acked.add(g)
        for s in self.view.l3:
            l3 = self.cl.node(s)
            self.net.send(self, l3, l3.on_flush_eof, (g, self.chain), "proxy", depart)
        leader = self.cl.leader
        self.net.send(self, leader, leader.on_prepare_ack, ("L2", self.chain, g), "proxy", depart)

    def swap_complete(self) -> bool:
        for key, js in self.my_gained.items():
            if self.unpopulated.get(key):
                return False
            pend = self.cache.pending.get(key)
            if pend is not None and any(j in pend[1] for j in js):
                return False
        return True

    def _check_swap_done(self, depart: int) -> None:
        g = self.cur_gen
        if g in self.swap_reported or self.cl.gens[g].final or not self.is_tail():
            return
        if self.committed < g or not self.swap_complete():
            return
        self.swap_reported.add(g)
        leader = self.cl.leader
        self.net.send(self, leader, leader.on_swap_done, ("L2", self.chain, g), "proxy", depart)

    # -- membership ----------------------------------------------------------
    def on_epoch(self, change: MembershipChange) -> None:
        if self.dead:
            return
        if change.server == self.name:
            self.halt()
            return
        self.view.apply(change)
        self.epoch = change.epoch  # recovery traffic must be fenced under the new view
        self._recover(change)
        self.advance_epoch(change.epoch)

    def _recover(self, change: MembershipChange) -> None:
        depart = self.depart()
        if change.layer == "L3":
            self.ring = self.view.ring
            self.moved |= set(change.moved_labels)
            self.drain_token += 1
            self.sim.at(self.sim.now + self.cl.drain_wait, self._end_drain, self.drain_token)
            return
        cc = change.chain_change
        if change.layer != "L2" or cc.chain_id != self.chain:
            return
        if cc.role == "tail" and self.is_tail():
            for _, entry in self.buffer:
                self._emit(entry, depart)
        elif cc.role == "middle" and cc.predecessor == self.name:
            s = self.succ()
            for _, entry in self.buffer:
                self.net.send(self, s, s.on_chain_entry, (self.name, entry), "proxy", depart)

    def _end_drain(self, token: int) -> None:
        if self.dead or token != self.drain_token:
            return
        moved = self.moved
        self.moved = set()
        if not self.is_tail():
            return
        depart = self.depart()
        batch = [e.payload for _, e in self.buffer if e.kind == "req" and e.payload.label in moved]
        order = shuffled_replay_order([r.label for r in batch], self.replay_rng)
        for i in order:
            self._send_l3(batch[i], depart)
        self.cl.audit.replays.append((self.sim.now, self.name, len(batch)))


# ---------------------------------------------------------------------------
# L3 and the store


class L3Server(Node):
    def __init__(self, cl, name: str):
        super().__init__(name, cl.sim, cl.net, 0)
        self.cl = cl
        self.view = cl.view.copy()
        self.fenced = True
        self.queues: Dict[int, Deque[Request]] = {d: deque() for d in cl.l2_ids}
        self.order = list(cl.l2_ids)
        self.ledger = DedupLedger()
        self.locks: Set[bytes] = set()
        self.parked: Dict[bytes, Deque[Request]] = {}
        self.ready: Deque[Request] = deque()
        self.link_free = 0
        self.issue_armed = False
        self.pick = cl.sim.uniform_stream(f"sched/{name}")
        self.ring = cl.initial_ring
        self.cur_gen = 0
        self.prepared = 0
        self.committed = 0
        self.eofs: Dict[int, Set[int]] = {}
        self.prep_acked: Set[int] = set()
        self.outstanding = 0
        self.issued = 0
        self.last_issue: Optional[int] = None
        self.last_acked_issue: Optional[int] = None
        self.learn_ctr = 0
        self.scheduler = WeightedScheduler({})
        self.served: Dict[int, int] = {d: 0 for d in cl.l2_ids}
        self._reweigh()

    def _reweigh(self) -> None:
        gen = self.cl.gens[self.cur_gen]
        w = compute_weights(gen.label_map, self.cl.topo.router, self.ring).get(self.name, {})
        self.scheduler.set_weights(w)

    def on_request(self, req: Request) -> None:
        if self.dead:
            return
        st = self.ledger.ingest(req.seq)
        if st == ACCEPT:
            self.cl.audit.receipts.append((self.sim.now, req.l2_chain, req.batch_id))
            if req.gen > self.cur_gen:
                self.cur_gen = req.gen
                self._reweigh()
            self.queues[req.l2_chain].append(req)
            self._arm()
        elif st == DONE:
            self._ack(req, self.sim.now)

    def _arm(self) -> None:
        if not self.issue_armed:
            self.issue_armed = True
            now = self.sim.now
            self.sim.at(self.link_free if self.link_free > now else now, self._issue, None)

    def _next(self) -> Optional[Request]:
        if self.ready:
            return self.ready.popleft()
        queues = self.queues
        while True:
            nonempty = [d for d in self.order if queues[d]]
            if not nonempty:
                return None
            d = self.scheduler.pick(nonempty, self.pick.next())
            req = queues[d].popleft()
            if req.label in self.locks:
                self.parked.setdefault(req.label, deque()).append(req)
                continue
            self.served[d] += 1
            return req

    def _has_work(self) -> bool:
        return bool(self.ready) or any(self.queues[d] for d in self.order)

    def _issue(self, _) -> None:
        self.issue_armed = False
        if self.dead:
            return
        req = self._next()
        if req is None:
            return
        now = self.sim.now
        self.locks.add(req.label)
        self.link_free = now + self.cl.config.l3_service
        self.outstanding += 1
        self.issued += 1
        self.last_issue = now
        self.cl.audit.issues.append((now, self.name, req.seq, req.batch_id, req.gen, req.label, req.l2_chain))
        kv = self.cl.kv
        self.net.send(self, kv, kv.on_get, (self, req, now), "kv")
        if self._has_work():
            self.issue_armed = True
            self.sim.at(self.link_free, self._issue, None)

    def on_kv_response(self, msg) -> None:
        if self.dead:
            return
        req, ct, issued = msg
        crypto = self.cl.crypto
        label = req.label
        plain = crypto.decrypt_value(ct, label)
        out = req.write_value if req.write_value is not None else plain
        kv = self.cl.kv
        now = self.sim.now
        self.net.send(self, kv, kv.on_put, (self, label, crypto.encrypt_value(out, label)), "kv")
        self.locks.discard(label)
        waiting = self.parked.get(label)
        if waiting:
            self.ready.append(waiting.popleft())
            if not waiting:
                del self.parked[label]
        self.outstanding -= 1
        if not self.ack_silent:
            self.last_acked_issue = issued
            self._ack(req, now)
        if req.kind != OpKind.FAKE and req.client is not None:
            result = OK if req.kind == OpKind.WRITE else (req.reply_value if req.reply_value is not None else plain)
            client = req.client
            self.net.send(self, client, client.on_reply, (req.op_id, result, None), "client")
        if req.learn is not None:
            self.learn_ctr += 1
            head = self.cl.node(self.view.l2[req.l2_chain].head)
            key, version = req.learn
            self.net.send(self, head, head.on_learn, (key, plain, version, (self.name, self.learn_ctr)), "proxy")
        if self._has_work():
            self._arm()
        self._check_prepare_ack()

    def _ack(self, req: Request, depart: int) -> None:
        self.ledger.complete(req.seq)
        tail = self.cl.node(self.view.l2[req.l2_chain].tail)
        self.net.send(self, tail, tail.on_l3_ack, req.seq, "proxy", depart)

    # -- distribution change -----------------------------------------------
    def on_flush_eof(self, msg) -> None:
        if self.dead:
            return
        gen, l2_chain = msg
        self.eofs.setdefault(gen, set()).add(l2_chain)
        self._check_prepare_ack()

    def on_prepare(self, gen: int) -> None:
        if self.dead:
            return
        self.prepared = max(self.prepared, gen)
        self._check_prepare_ack()

    def on_commit(self, gen: int) -> None:
        if self.dead:
            return
        if self.cur_gen < gen:
            self.cur_gen = gen
            self._reweigh()
        self.committed = max(self.committed, gen)
        leader = self.cl.leader
        self.net.send(self, leader, leader.on_commit_ack, ("L3", self.name, gen), "proxy")

    def _check_prepare_ack(self) -> None:
        g = self.prepared
        if g <= self.committed or g in self.prep_acked or self.outstanding:
            return
        if not set(self.cl.l2_ids) <= self.eofs.get(g, set()):
            return
        waiting = list(self.ready) + [r for q in self.queues.values() for r in q]
        waiting += [r for q in self.parked.values() for r in q]
        if any(r.gen < g for r in waiting):
            return
        self.prep_acked.add(g)
        leader = self.cl.leader
        self.net.send(self, leader, leader.on_prepare_ack, ("L3", self.name, g), "proxy")

    def on_epoch(self, change: MembershipChange) -> None:
        if self.dead:
            return
        if change.server == self.name:
            self.kill()
            return
        self.view.apply(change)
        if change.layer == "L3":
            self.ring = self.view.ring
            self._reweigh()
        self.advance_epoch(change.epoch)


class KVNode(Node):
    """The untrusted store; records what it observes."""

    def __init__(self, cl, store):
        super().__init__("kv", cl.sim, cl.net, 0)
        self.cl = cl
        self.store = store

    def on_get(self, msg) -> None:
        l3, req, issued = msg
        ct = self.store.get(req.label, l3.name)
        self.cl.audit.arrivals.append((self.sim.now, l3.name, req.seq, req.batch_id, req.gen))
        self.net.send(self, l3, l3.on_kv_response, (req, ct, issued), "kv")

    def on_put(self, msg) -> None:
        l3, label, ct = msg
        self.store.put(label, ct, l3.name)


# ---------------------------------------------------------------------------
# Master and leader


class Master(Node):
    """Failure detector and membership authority (modelled as reliable)."""

    def __init__(self, cl):
        super().__init__("master", cl.sim, cl.net, 0)
        self.cl = cl

    def schedule(self, inj: FailureInjection) -> None:
        cfg = self.cl.config
        node = self.cl.node(inj.server)
        if inj.mode == MODE_KILL:
            if inj.gamma > 0:
                self.sim.at(max(0, inj.fire_time - inj.gamma), self._silence, node)
            node.death_tick = inj.fire_time if node.death_tick is None else min(node.death_tick, inj.fire_time)
            self.sim.at(inj.fire_time, self._kill, node)
        if inj.r is not None:
            detect = inj.fire_time + inj.r
        else:
            detect = heartbeat_detection_tick(inj.fire_time, cfg.heartbeat_interval, cfg.heartbeat_misses)
        self.sim.at(detect, self.declare, inj)

    def _silence(self, node) -> None:
        node.ack_silent = True

    def _kill(self, node) -> None:
        node.kill()

    def declare(self, inj: FailureInjection) -> None:
        view = self.cl.view
        if not view.is_live(inj.server):
            return
        node = self.cl.node(inj.server)
        change = view.remove(inj.server, self.cl.all_labels())
        self.cl.audit.epochs.append((self.sim.now, change))
        if change.layer == "L3" and node.last_issue is not None:
            t = node.last_issue
            acked = node.last_acked_issue if node.last_acked_issue is not None else -1
            self.cl.audit.failures.append(FailureEvent(inj.server, t, t - acked, self.sim.now - t))
        for target in self.cl.notify_targets():
            if target.dead and target is not node:
                continue
            self.net.send(self, target, target.on_epoch, change, "proxy")


class Leader(Node):
    """Distribution-change coordinator.

    Logically part of L1 chain 0; its protocol state is treated as chain
    replicated, which the simulation models by never failing this node.
    """

    def __init__(self, cl, monitor: Optional[DistributionMonitor], max_transitions: int):
        super().__init__("leader", cl.sim, cl.net, 0)
        self.cl = cl
        self.view = cl.view.copy()
        self.fenced = True
        self.monitor = monitor
        self.state = TransitionState()
        self.max_transitions = max_transitions
        self.started = 0
        self.stage: Optional[str] = None  # swap | swapping | final
        self.plan = cl.plan
        self.swap = None
        self.cur_gen = 0
        self.target = 0
        self.swap_done: Set[tuple] = set()
        self.log: List[Tuple[int, str, int]] = []

    def _event(self, what: str, gen: int) -> None:
        self.log.append((self.sim.now, what, gen))
        self.cl.audit.protocol.append((self.sim.now, what, gen))

    def on_observe(self, key: str) -> None:
        if self.monitor is None or self.stage is not None or self.started >= self.max_transitions:
            return
        new = observe_key(self.monitor, key)
        if new is not None:
            self.start(AccessDistribution(dict(zip(self.monitor.keys, new.tolist()))))

    def start(self, dist: AccessDistribution) -> None:
        if self.stage is not None:
            return
        self.started += 1
        label_map = self.cl.gens[self.cur_gen].label_map
        self.swap = build_swap_plan(self.plan, dist, label_map)
        g = self.cur_gen + 1
        self.cl.gens[g] = self.swap.swap_generation(g)
        self.stage = "swap"
        self._begin(g)

    def _participants(self) -> Set[tuple]:
        view = self.view
        out = {("L1", c) for c in self.cl.l1_ids} | {("L2", d) for d in self.cl.l2_ids}
        out |= {("L3", s) for s in view.l3}
        return out

    def _send_all(self, what: str, pending: Optional[Set[tuple]] = None) -> None:
        view = self.view
        for pid in sorted(self._participants()):
            if pending is not None and pid in pending:
                continue
            layer, ident = pid
            if layer == "L3":
                node = self.cl.node(ident)
            else:
                node = self.cl.node(view.chain(layer, ident).head)
            self.net.send(self, node, getattr(node, what), self.target, "proxy")

    def _begin(self, g: int) -> None:
        self.target = g
        self.state.advance(PHASE_PREPARE)
        self._event("prepare", g)
        self._send_all("on_prepare")

    def on_prepare_ack(self, pid) -> None:
        layer, ident, g = pid
        if self.state.phase != PHASE_PREPARE or g != self.target:
            return
        self.state.prepare_acks.add((layer, ident))
        self._maybe_commit()

    def _maybe_commit(self) -> None:
        if self.state.phase == PHASE_PREPARE and self._participants() <= self.state.prepare_acks:
            self.state.advance(PHASE_COMMIT)
            self._event("commit", self.target)
            self._send_all("on_commit")

    def on_commit_ack(self, pid) -> None:
        layer, ident, g = pid
        if self.state.phase != PHASE_COMMIT or g != self.target:
            return
        self.state.commit_acks.add((layer, ident))
        self._maybe_finish()

    def _maybe_finish(self) -> None:
        if self.state.phase != PHASE_COMMIT or not self._participants() <= self.state.commit_acks:
            return
        self.state.advance(PHASE_IDLE)
        self.cur_gen = self.target
        self._event("committed", self.target)
        if self.stage == "swap":
            self.stage = "swapping"
            self._maybe_terminate()
        elif self.stage == "final":
            self.stage = None
            self.plan = self.swap.new_plan
            if self.monitor is not None:
                self.monitor.reset(self.plan.dist.vector())

    def on_swap_done(self, pid) -> None:
        layer, ident, g = pid
        if g == self.cur_gen or (self.stage == "swap" and g == self.target):
            self.swap_done.add((ident, g))
        self._maybe_terminate()

    def _maybe_terminate(self) -> None:
        if self.stage != "swapping":
            return
        g = self.cur_gen
        if all((d, g) in self.swap_done for d in self.cl.l2_ids):
            final = g + 1
            self.cl.gens[final] = self.swap.final_generation(final)
            self.stage = "final"
            self._begin(final)

    def on_epoch(self, change: MembershipChange) -> None:
        self.view.apply(change)
        self.epoch = change.epoch  # resent protocol messages must be fenced under the new view
        if self.state.phase == PHASE_PREPARE:
            self._send_all("on_prepare", self.state.prepare_acks)
            self._maybe_commit()
        elif self.state.phase == PHASE_COMMIT:
            self._send_all("on_commit", self.state.commit_acks)
            self._maybe_finish()
        self.advance_epoch(change.epoch)
