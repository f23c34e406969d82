"""Per-layer proxy logic shared by the simulator and any live transport.

L1 turns client requests into smoothed batches, L2 owns the write buffer
for its share of plaintext keys, L3 owns a slice of the ciphertext labels
and issues read-then-write pairs against the store. Functions here are pure
with respect to the network: they take state and return what to send.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

from .crypto import CryptoSuite
from .hashing import DEFAULT_VNODES, HashRing, PlaintextRouter
from .pancake import (
    DUMMY_KEY,
    ClientOp,
    OpKind,
    Replica,
    SmoothingPlan,
    UpdateCacheState,
    generate_batch,
    label_of,
    update_cache_apply,
)

MESSAGE_SCHEMA_VERSION = 1


class ProtocolFault(AssertionError):
    """A server received work it does not own."""


class UnknownKey(KeyError):
    pass


def route_key(replica: Replica) -> str:
    """Plaintext routing key; dummies spread over L2 chains by index."""
    if replica.key == DUMMY_KEY:
        return f"{DUMMY_KEY}#{replica.index}"
    return replica.key


@dataclass
class LayerTopology:
    l1_chains: List[int]
    l2_chains: List[int]
    l3_servers: List[str]
    f: int = 1
    vnodes: int = DEFAULT_VNODES
    salt: bytes = b"shortstack"
    router: PlaintextRouter = field(init=False)

    def __post_init__(self) -> None:
        if len(self.l3_servers) < self.f + 1:
            raise ValueError(f"need at least f+1={self.f + 1} L3 servers, have {len(self.l3_servers)}")
        if not self.l1_chains or not self.l2_chains:
            raise ValueError("need at least one L1 and one L2 chain")
        self.router = PlaintextRouter(self.l2_chains, self.salt + b"/plain")

    def ring(self, live: Optional[Iterable[str]] = None) -> HashRing:
        servers = self.l3_servers if live is None else [s for s in self.l3_servers if s in set(live)]
        return HashRing(servers, self.vnodes, self.salt + b"/ring")


# ---------------------------------------------------------------------------
# Generations: one immutable bundle per smoothing configuration


@dataclass
class Generation:
    """Smoothing configuration in force for one generation number.

    ``sampler`` provides ``batch_size``, ``replica_count``, ``sample_fake``
    and ``sample_key`` (a :class:`SmoothingPlan` or a swap-phase plan).
    ``read_counts`` restricts real accesses to already-populated replicas,
    ``cache_counts`` is the replica range a write marks stale.
    """

    number: int
    sampler: Any
    label_map: Dict[Replica, bytes]
    real_prob: float = 0.5
    read_counts: Optional[Dict[str, int]] = None
    cache_counts: Optional[Dict[str, int]] = None
    gained: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    final: bool = True

    def __post_init__(self) -> None:
        if self.cache_counts is None:
            self.cache_counts = dict(self.sampler.replica_count)

    @property
    def labels(self) -> List[bytes]:
        return list(self.label_map.values())

    def real_targets(self, key: str) -> int:
        if self.read_counts is None:
            return self.sampler.replica_count[key]
        return self.read_counts[key]

    @classmethod
    def initial(cls, plan: SmoothingPlan, crypto: CryptoSuite, number: int = 0) -> "Generation":
        return cls(number, plan, {rep: label_of(rep, crypto) for rep in plan.replicas})


# ---------------------------------------------------------------------------
# Requests and wire schema


class Request:
    """One ciphertext access travelling L1 -> L2 -> L3 -> KV.

    ``kind``, ``batch_id``, ``gen`` and the client route never leave the
    trusted proxies; the store only sees the label and a padded ciphertext.
    """

    __slots__ = ("seq", "batch_id", "replica", "label", "kind", "value", "op_id", "client",
                 "gen", "write_value", "reply_value", "learn", "l2_chain")

    def __init__(self, seq, batch_id, replica, label, kind, value=None, op_id=None, client=None, gen=0):
        self.seq = seq
        self.batch_id = batch_id
        self.replica = replica
        self.label = label
        self.kind = kind
        self.value = value
        self.op_id = op_id
        self.client = client
        self.gen = gen
        self.write_value = None  # set by L2; None means write back what is read
        self.reply_value = None  # set by L2 for real reads served from the write buffer
        self.learn = None  # (key, version) when L3 should report the plaintext back
        self.l2_chain = None

    def __repr__(self) -> str:
        return f"Request(seq={self.seq}, {self.kind}, {self.replica})"

    @property
    def is_real(self) -> bool:
        return self.kind != OpKind.FAKE

    def to_wire(self) -> dict:
        return {
            "type": "request",
            "seq": list(self.seq),
            "batch_id": self.batch_id,
            "replica": [self.replica.key, self.replica.index],
            "label": self.label.hex(),
            "kind": self.kind,
            "value": None if self.value is None else self.value.hex(),
            "op_id": None if self.op_id is None else list(self.op_id),
            "gen": self.gen,
            "write_value": None if self.write_value is None else self.write_value.hex(),
            "reply_value": None if self.reply_value is None else self.reply_value.hex(),
            "learn": None if self.learn is None else list(self.learn),
            "l2_chain": self.l2_chain,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "Request":
        hx = lambda v: None if v is None else bytes.fromhex(v)
        r = cls(tuple(doc["seq"]), doc["batch_id"], Replica(*doc["replica"]), bytes.fromhex(doc["label"]),
                doc["kind"], hx(doc["value"]), None if doc["op_id"] is None else tuple(doc["op_id"]),
                None, doc["gen"])
        r.write_value = hx(doc["write_value"])
        r.reply_value = hx(doc["reply_value"])
        r.learn = None if doc["learn"] is None else tuple(doc["learn"])
        r.l2_chain = doc["l2_chain"]
        return r


CONTROL_TYPES = ("ack", "batch_ack", "flush_eof", "prepare", "prepare_ack", "commit", "commit_ack",
                 "epoch", "learn", "swap_done", "observe", "reply", "client_request")


def encode_message(msg_type: str, body: Mapping[str, Any]) -> str:
    """Serialize a control or data message to versioned JSON text."""
    if msg_type != "request" and msg_type not in CONTROL_TYPES:
        raise ValueError(f"unknown message type {msg_type!r}")
    return json.dumps({"v": MESSAGE_SCHEMA_VERSION, "type": msg_type, "body": body}, sort_keys=True)


def decode_message(text: str) -> Tuple[str, dict]:
    doc = json.loads(text)
    if doc.get("v") != MESSAGE_SCHEMA_VERSION:
        raise ValueError(f"unsupported message schema version {doc.get('v')!r}")
    return doc["type"], doc["body"]


# ---------------------------------------------------------------------------
# L1


def l1_process_request(pending: Deque[ClientOp], gen: Generation, router: PlaintextRouter, rng,
                       next_seq, batch_id) -> List[Tuple[int, Request]]:
    """Generate one batch and route each element to its L2 chain.

    ``next_seq`` is a zero-argument callable yielding fresh sequence numbers.
    """
    slots = generate_batch(pending, gen.sampler, rng, gen.real_prob, gen.read_counts)
    out = []
    for slot in slots:
        op = slot.op
        req = Request(next_seq(), batch_id, slot.replica, gen.label_map[slot.replica], slot.kind,
                      slot.value, None if op is None else op.op_id, None if op is None else op.client,
                      gen.number)
        chain = router.route(route_key(slot.replica))
        req.l2_chain = chain
        out.append((chain, req))
    return out


def check_known_key(key: str, gen: Generation) -> None:
    if key not in gen.sampler.replica_count or key == DUMMY_KEY:
        raise UnknownKey(key)


# ---------------------------------------------------------------------------
# L2


def l2_process(req: Request, cache: UpdateCacheState, gen: Generation, chain_id: int,
               router: PlaintextRouter) -> Request:
    """Run the write buffer for ``req`` and attach the value L3 must write."""
    owner = router.route(route_key(req.replica))
    if owner != chain_id:
        raise ProtocolFault(f"L2 chain {chain_id} received {req.replica} owned by chain {owner}")
    kind = req.kind
    value = update_cache_apply(cache, req.replica, kind, req.value, gen.cache_counts)
    if kind == OpKind.WRITE:
        req.write_value = value
    else:
        req.write_value = value
        if kind == OpKind.READ and value is not None:
            req.reply_value = value
    return req


# ---------------------------------------------------------------------------
# L3 weights and scheduling


WeightVector = Dict[Hashable, Dict[int, float]]


def compute_weights(label_map: Mapping[Replica, bytes], router: PlaintextRouter, ring: HashRing) -> WeightVector:
    """Per-L3 dequeue probability for each feeding L2 chain.

    Proportional to the number of labels that chain routes to the server.
    """
    census: Dict[Hashable, Counter] = defaultdict(Counter)
    for rep, label in label_map.items():
        census[ring.owner(label)][router.route(route_key(rep))] += 1
    weights: WeightVector = {}
    for server in ring.servers:
        counts = census.get(server, Counter())
        total = sum(counts.values())
        weights[server] = {c: k / total for c, k in sorted(counts.items())} if total else {}
    return weights


class WeightedScheduler:
    """Pick the next L2 queue to serve according to ``weights``.

    Empty queues are skipped and the remaining weights renormalized. Queues
    with no weight are served uniformly only when every weighted queue is
    empty (can happen transiently while configurations change).
    """

    def __init__(self, weights: Mapping[int, float]):
        self.set_weights(weights)

    def set_weights(self, weights: Mapping[int, float]) -> None:
        self.weights = dict(weights)

    def pick(self, nonempty: Sequence[int], u: float) -> int:
        if len(nonempty) == 1:
            return nonempty[0]
        w = [self.weights.get(c, 0.0) for c in nonempty]
        total = math.fsum(w)
        if total <= 0.0:
            return nonempty[min(int(u * len(nonempty)), len(nonempty) - 1)]
        target = u * total
        acc = 0.0
        for c, wc in zip(nonempty, w):
            acc += wc
            if target < acc:
                return c
        return next(c for c, wc in zip(reversed(nonempty), reversed(w)) if wc > 0)
