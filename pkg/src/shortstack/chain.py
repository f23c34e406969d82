"""Building blocks for f+1 replica chains: ordered buffers, dedup ledgers,
role reassignment and staggered placement on physical servers."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, Hashable, Iterator, List, Optional, Tuple


class ChainUnavailable(RuntimeError):
    """Every replica of a chain has failed."""


class ChainBuffer:
    """Entries a replica has applied but whose downstream effect is unacked."""

    def __init__(self):
        self._entries: "OrderedDict[Hashable, Any]" = OrderedDict()

    def add(self, seq: Hashable, entry: Any) -> None:
        self._entries[seq] = entry

    def ack(self, seq: Hashable) -> Optional[Any]:
        return self._entries.pop(seq, None)

    def __contains__(self, seq: Hashable) -> bool:
        return seq in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Tuple[Hashable, Any]]:
        return iter(list(self._entries.items()))

    def get(self, seq: Hashable) -> Optional[Any]:
        return self._entries.get(seq)

    def seqs(self) -> List[Hashable]:
        return list(self._entries)


ACCEPT = "accept"
DISCARD = "discard"
DONE = "done"


class DedupLedger:
    """Remembers every sequence number seen, and which ones completed.

    ``ingest`` answers ``accept`` for a first sighting, ``discard`` for a
    repeat still in progress and ``done`` for a repeat that already
    completed (the caller should re-acknowledge it).
    """

    def __init__(self):
        self._state: Dict[Hashable, bool] = {}

    def ingest(self, seq: Hashable) -> str:
        done = self._state.get(seq)
        if done is None:
            self._state[seq] = False
            return ACCEPT
        return DONE if done else DISCARD

    def seen(self, seq: Hashable) -> bool:
        return seq in self._state

    def complete(self, seq: Hashable) -> None:
        self._state[seq] = True

    def is_done(self, seq: Hashable) -> bool:
        return self._state.get(seq, False)

    def __len__(self) -> int:
        return len(self._state)


@dataclass
class ChainConfig:
    """Ordered live replicas of one chain, head first."""

    chain_id: Hashable
    replicas: List[str]
    version: int = 0

    @property
    def head(self) -> str:
        if not self.replicas:
            raise ChainUnavailable(f"chain {self.chain_id} has no live replica")
        return self.replicas[0]

    @property
    def tail(self) -> str:
        if not self.replicas:
            raise ChainUnavailable(f"chain {self.chain_id} has no live replica")
        return self.replicas[-1]

    def successor(self, name: str) -> Optional[str]:
        i = self.replicas.index(name)
        return self.replicas[i + 1] if i + 1 < len(self.replicas) else None

    def predecessor(self, name: str) -> Optional[str]:
        i = self.replicas.index(name)
        return self.replicas[i - 1] if i > 0 else None

    def failover(self, failed: str) -> "ChainChange":
        """Splice ``failed`` out and report which role changed."""
        if failed not in self.replicas:
            raise KeyError(failed)
        i = self.replicas.index(failed)
        was_head, was_tail = i == 0, i == len(self.replicas) - 1
        pred = self.replicas[i - 1] if i > 0 else None
        succ = self.replicas[i + 1] if i + 1 < len(self.replicas) else None
        self.replicas.pop(i)
        self.version += 1
        if not self.replicas:
            raise ChainUnavailable(f"chain {self.chain_id} lost its last replica")
        role = "head" if was_head else ("tail" if was_tail else "middle")
        return ChainChange(self.chain_id, failed, role, pred, succ)


@dataclass(frozen=True)
class ChainChange:
    chain_id: Hashable
    failed: str
    role: str  # head | middle | tail
    predecessor: Optional[str]
    successor: Optional[str]


def stagger_packing(k: int, f: int, l1_chains: int = None, l2_chains: int = None,
                    l3_servers: int = None) -> Dict[int, List[str]]:
    """Place logical instances on ``k`` physical servers.

    Replica ``j`` of chain ``i`` goes to server ``(i + j) mod k`` so the
    ``f + 1`` replicas of a chain land on distinct servers. With ``k`` chains
    per layer and ``k`` L3 servers every physical server hosts ``2f + 3``
    instances.
    """
    if f + 1 > k:
        raise ValueError("a chain of f+1 replicas needs at least f+1 physical servers")
    l1_chains = k if l1_chains is None else l1_chains
    l2_chains = k if l2_chains is None else l2_chains
    l3_servers = k if l3_servers is None else l3_servers
    placement: Dict[int, List[str]] = {p: [] for p in range(k)}
    for layer, count in (("L1", l1_chains), ("L2", l2_chains)):
        for i in range(count):
            for j in range(f + 1):
                placement[(i + j) % k].append(f"{layer}.{i}.{j}")
    for s in range(l3_servers):
        placement[s % k].append(f"L3.{s}")
    return placement
