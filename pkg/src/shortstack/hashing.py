"""Stable keyed hashing for plaintext routing and a consistent-hash ring for
ciphertext labels."""

from __future__ import annotations

import bisect
import hashlib
from collections import Counter
from typing import Dict, Hashable, Iterable, List, Sequence

DEFAULT_VNODES = 64


def stable_hash(data: bytes, salt: bytes = b"") -> int:
    """64-bit keyed hash that is identical across processes and platforms."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8, key=salt[:64]).digest(), "big")


class PlaintextRouter:
    """Maps plaintext keys onto a fixed list of L2 chains."""

    def __init__(self, chains: Sequence[int], salt: bytes = b"plain"):
        if not chains:
            raise ValueError("need at least one chain")
        self.chains = list(chains)
        self.salt = salt
        self._cache: Dict[str, int] = {}

    def route(self, key: str) -> int:
        chain = self._cache.get(key)
        if chain is None:
            chain = self.chains[stable_hash(key.encode("utf-8"), self.salt) % len(self.chains)]
            self._cache[key] = chain
        return chain


class HashRing:
    """Consistent-hash ring with a fixed number of virtual nodes per server.

    Removing a server only reassigns the points it owned, so labels owned by
    survivors never move.
    """

    def __init__(self, servers: Iterable[Hashable], vnodes: int = DEFAULT_VNODES, salt: bytes = b"ring"):
        self.vnodes = vnodes
        self.salt = salt
        self._servers: List[Hashable] = []
        self._points: List[int] = []
        self._owners: List[Hashable] = []
        self._memo: Dict[bytes, Hashable] = {}
        for s in servers:
            self.add(s)

    @property
    def servers(self) -> List[Hashable]:
        return list(self._servers)

    def _vnode_points(self, server: Hashable) -> List[int]:
        tag = repr(server).encode("utf-8")
        return [stable_hash(tag + b"#" + i.to_bytes(4, "big"), self.salt) for i in range(self.vnodes)]

    def add(self, server: Hashable) -> None:
        if server in self._servers:
            raise ValueError(f"server {server!r} already on ring")
        self._servers.append(server)
        for p in self._vnode_points(server):
            i = bisect.bisect_left(self._points, p)
            self._points.insert(i, p)
            self._owners.insert(i, server)
        self._memo.clear()

    def remove(self, server: Hashable) -> None:
        if server not in self._servers:
            raise KeyError(server)
        self._servers.remove(server)
        keep = [(p, o) for p, o in zip(self._points, self._owners) if o != server]
        self._points = [p for p, _ in keep]
        self._owners = [o for _, o in keep]
        self._memo.clear()

    def without(self, server: Hashable) -> "HashRing":
        ring = HashRing([], self.vnodes, self.salt)
        ring._servers = [s for s in self._servers if s != server]
        keep = [(p, o) for p, o in zip(self._points, self._owners) if o != server]
        ring._points = [p for p, _ in keep]
        ring._owners = [o for _, o in keep]
        return ring

    def owner(self, label: bytes) -> Hashable:
        hit = self._memo.get(label)
        if hit is not None:
            return hit
        if not self._points:
            raise LookupError("ring is empty")
        h = stable_hash(label, self.salt)
        i = bisect.bisect_right(self._points, h) % len(self._points)
        owner = self._owners[i]
        self._memo[label] = owner
        return owner

    def census(self, labels: Iterable[bytes]) -> Counter:
        return Counter(self.owner(lbl) for lbl in labels)

    def assignment(self, labels: Iterable[bytes]) -> Dict[bytes, Hashable]:
        return {lbl: self.owner(lbl) for lbl in labels}
