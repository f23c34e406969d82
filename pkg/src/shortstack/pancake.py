"""Frequency smoothing: selective replication, fake queries, batching and
the UpdateCache write buffer.

A plan over ``n`` plaintext keys gives key ``k`` ``R(k) = max(1, ceil(n*p(k)))``
replicas and pads the replica set with dummies up to exactly ``2n``. Each
batch slot is real with probability one half, so the fake distribution has
to top every replica up to ``1/(2n)``::

    0.5 * p(k) / R(k) + 0.5 * fake(k, j) == 1 / (2n)

which forces ``fake(k, j) = 1/n - p(k)/R(k)`` on real replicas and ``1/n``
on dummies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .crypto import CryptoSuite

DEFAULT_BATCH_SIZE = 3
DUMMY_KEY = "\x00dummy"
PLAN_FORMAT_VERSION = 1
_NORMALIZATION_TOL = 1e-9


class InvalidDistribution(ValueError):
    pass


class DummyWriteError(ValueError):
    """A write addressed a dummy replica; clients cannot name dummies."""


class Replica(NamedTuple):
    key: str
    index: int  # 1-based

    @property
    def is_dummy(self) -> bool:
        return self.key == DUMMY_KEY


def check_client_key(key: str) -> None:
    if not isinstance(key, str) or key.startswith("\x00"):
        raise ValueError(f"invalid client key {key!r}")


@dataclass(frozen=True)
class AccessDistribution:
    """Probability of each plaintext key; insertion order is the key order."""

    probs: Mapping[str, float]

    def __post_init__(self) -> None:
        if len(self.probs) == 0:
            raise InvalidDistribution("distribution over zero keys")
        for key, p in self.probs.items():
            check_client_key(key)
            if not p >= 0.0:
                raise InvalidDistribution(f"negative or NaN probability for {key!r}")
        total = math.fsum(self.probs.values())
        if abs(total - 1.0) > _NORMALIZATION_TOL:
            raise InvalidDistribution(f"probabilities sum to {total!r}, not 1")

    @property
    def n(self) -> int:
        return len(self.probs)

    @property
    def keys(self) -> List[str]:
        return list(self.probs)

    def vector(self) -> np.ndarray:
        return np.fromiter(self.probs.values(), dtype=float, count=self.n)

    @classmethod
    def from_weights(cls, keys: Sequence[str], weights: Iterable[float]) -> "AccessDistribution":
        w = np.asarray(list(weights), dtype=float)
        if len(w) != len(keys):
            raise InvalidDistribution("keys and weights differ in length")
        if w.sum() <= 0:
            raise InvalidDistribution("weights sum to zero")
        w = w / w.sum()
        return cls(dict(zip(keys, w.tolist())))

    @classmethod
    def uniform(cls, keys: Sequence[str]) -> "AccessDistribution":
        return cls.from_weights(keys, np.ones(len(keys)))


@dataclass
class SmoothingPlan:
    """Replica layout and fake distribution for one distribution estimate.

    ``replicas`` lists every ciphertext slot: real replicas key by key, then
    the dummies. ``fake_dist`` and ``labels`` are aligned with it.
    """

    dist: AccessDistribution
    replica_count: Dict[str, int]
    dummy_count: int
    batch_size: int = DEFAULT_BATCH_SIZE
    replicas: List[Replica] = field(init=False)
    fake_dist: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n = self.dist.n
        self.replicas = [Replica(k, j) for k in self.dist.keys for j in range(1, self.replica_count[k] + 1)]
        self.replicas += [Replica(DUMMY_KEY, j) for j in range(1, self.dummy_count + 1)]
        if len(self.replicas) != 2 * n:
            raise InvalidDistribution(f"plan has {len(self.replicas)} replicas, expected {2 * n}")
        fake = np.empty(len(self.replicas))
        for i, rep in enumerate(self.replicas):
            if rep.is_dummy:
                fake[i] = 1.0 / n
            else:
                fake[i] = max(0.0, 1.0 / n - self.dist.probs[rep.key] / self.replica_count[rep.key])
        self.fake_dist = fake / fake.sum()
        self._index = {rep: i for i, rep in enumerate(self.replicas)}
        self._fake_cdf = np.cumsum(self.fake_dist)
        self._fake_cdf[-1] = 1.0
        self._key_cdf = np.cumsum(self.dist.vector())
        self._key_cdf[-1] = 1.0
        self._keys = self.dist.keys

    @property
    def n(self) -> int:
        return self.dist.n

    @property
    def total_labels(self) -> int:
        return len(self.replicas)

    def count(self, key: str) -> int:
        if key == DUMMY_KEY:
            return self.dummy_count
        return self.replica_count[key]

    def index_of(self, replica: Replica) -> int:
        return self._index[replica]

    def fake_prob(self, replica: Replica) -> float:
        return float(self.fake_dist[self._index[replica]])

    def sample_fake(self, u: float) -> Replica:
        return self.replicas[int(np.searchsorted(self._fake_cdf, u, side="right"))]

    def sample_key(self, u: float) -> str:
        return self._keys[int(np.searchsorted(self._key_cdf, u, side="right"))]

    def labels(self, crypto: CryptoSuite) -> List[bytes]:
        return [label_of(rep, crypto) for rep in self.replicas]

    # -- serialization -------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "format": "shortstack-plan",
            "version": PLAN_FORMAT_VERSION,
            "batch_size": self.batch_size,
            "keys": self.dist.keys,
            "probs": self.dist.vector().tolist(),
            "replica_count": [self.replica_count[k] for k in self.dist.keys],
            "dummy_count": self.dummy_count,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SmoothingPlan":
        doc = json.loads(text)
        if doc.get("format") != "shortstack-plan" or doc.get("version") != PLAN_FORMAT_VERSION:
            raise ValueError("not a version-1 shortstack plan document")
        keys = doc["keys"]
        dist = AccessDistribution(dict(zip(keys, doc["probs"])))
        return cls(dist, dict(zip(keys, doc["replica_count"])), doc["dummy_count"], doc["batch_size"])


def plan_smoothing(dist: AccessDistribution, batch_size: int = DEFAULT_BATCH_SIZE) -> SmoothingPlan:
    """Build the replica layout and fake distribution for ``dist``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dist.n
    counts = {k: max(1, math.ceil(n * p - 1e-9)) for k, p in dist.probs.items()}
    dummies = 2 * n - sum(counts.values())
    if dummies < 0:  # unreachable for a normalized input; guards float abuse
        raise InvalidDistribution("replica counts exceed 2n")
    return SmoothingPlan(dist, counts, dummies, batch_size)


def label_of(replica: Replica, crypto: CryptoSuite) -> bytes:
    """Deterministic ciphertext label for a replica."""
    key = replica.key.encode("utf-8")
    return crypto.prf(len(key).to_bytes(4, "big") + key + replica.index.to_bytes(4, "big"))


# ---------------------------------------------------------------------------
# Batches


class OpKind:
    READ = "read"
    WRITE = "write"
    FAKE = "fake"


@dataclass
class ClientOp:
    """A client request waiting for a real batch slot."""

    key: str
    kind: str  # OpKind.READ or OpKind.WRITE
    value: Optional[bytes] = None
    client: Optional[object] = None  # reply route, opaque to this module
    op_id: Optional[Tuple] = None


@dataclass
class BatchSlot:
    replica: Replica
    kind: str
    value: Optional[bytes] = None
    op: Optional[ClientOp] = None


class UniformStream:
    """Uniform floats drawn from a generator in blocks.

    The sequence is identical for any block size, which keeps seeded runs
    reproducible while amortizing numpy call overhead.
    """

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self._rng = rng
        self._block = block
        self._buf = rng.random(block).tolist()
        self._pos = 0

    def next(self) -> float:
        if self._pos == self._block:
            self._buf = self._rng.random(self._block).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


def generate_batch(pending_reals: Deque[ClientOp], plan: SmoothingPlan, rng,
                   real_prob: float = 0.5, read_counts: Optional[Mapping[str, int]] = None) -> List[BatchSlot]:
    """Produce ``plan.batch_size`` slots, each real with probability ``real_prob``.

    A real slot pops the oldest pending client op and targets a uniformly
    chosen replica of its key. When the queue is empty the slot still draws
    its key from the estimate (so per-label frequencies stay smooth) but is
    executed as a fake access. Remaining slots sample ``plan.fake_dist``.

    ``rng`` is a :class:`UniformStream` or a numpy Generator.
    ``read_counts`` optionally restricts real targets of a key to its first
    ``read_counts[k]`` replicas (used while replicas are being swapped).
    """
    draw = rng.next if isinstance(rng, UniformStream) else rng.random
    slots: List[BatchSlot] = []
    for _ in range(plan.batch_size):
        if draw() < real_prob:
            if pending_reals:
                op = pending_reals.popleft()
                r = plan.replica_count[op.key] if read_counts is None else read_counts[op.key]
                j = 1 + min(int(draw() * r), r - 1)
                slots.append(BatchSlot(Replica(op.key, j), op.kind, op.value, op))
            else:
                key = plan.sample_key(draw())
                r = plan.replica_count[key] if read_counts is None else read_counts[key]
                j = 1 + min(int(draw() * r), r - 1)
                slots.append(BatchSlot(Replica(key, j), OpKind.FAKE))
        else:
            slots.append(BatchSlot(plan.sample_fake(draw()), OpKind.FAKE))
    return slots


# ---------------------------------------------------------------------------
# UpdateCache


@dataclass
class UpdateCacheState:
    """Latest written value per key plus the replicas still holding older data."""

    pending: Dict[str, Tuple[bytes, Set[int]]] = field(default_factory=dict)

    def stale(self, key: str) -> Set[int]:
        entry = self.pending.get(key)
        return set(entry[1]) if entry else set()

    def copy(self) -> "UpdateCacheState":
        return UpdateCacheState({k: (v, set(s)) for k, (v, s) in self.pending.items()})


def update_cache_apply(state: UpdateCacheState, replica: Replica, kind: str,
                       value: Optional[bytes], plan_counts: Mapping[str, int]) -> Optional[bytes]:
    """Advance the cache for one access and return the value to write.

    ``None`` means "write back what is read". ``plan_counts`` maps a key to
    its current replica count.
    """
    key, j = replica
    if kind == OpKind.WRITE:
        if replica.is_dummy:
            raise DummyWriteError("dummy replicas cannot be written")
        others = set(range(1, plan_counts[key] + 1))
        others.discard(j)
        if others:
            state.pending[key] = (value, others)
        else:
            state.pending.pop(key, None)
        return value
    entry = state.pending.get(key)
    if entry is None or j not in entry[1]:
        return None
    cached, stale = entry
    stale.discard(j)
    if not stale:
        del state.pending[key]
    return cached
