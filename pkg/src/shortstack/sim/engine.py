"""Seeded discrete-event core: clock, event heap, RNG streams and a network
with per-link FIFO delivery."""

from __future__ import annotations

import heapq
import zlib
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..pancake import UniformStream

TICKS_PER_MS = 1000  # one tick is a microsecond


def stream_seed(seed: int, name: str) -> List[int]:
    return [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


class Simulator:
    """Event loop over integer ticks.

    Events at the same tick run in insertion order. Every consumer of
    randomness asks for its own named stream so adding or removing one
    component never perturbs another's draws.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self.now = 0
        self.events = 0
        self._heap: List[Tuple[int, int, Callable, object]] = []
        self._seq = 0
        self._hooks: Dict[int, List[Callable[[], None]]] = {}

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(stream_seed(self.seed, name))

    def uniform_stream(self, name: str, block: int = 1024) -> UniformStream:
        return UniformStream(self.rng(name), block)

    def at(self, tick: int, fn: Callable, arg=None) -> None:
        if tick < self.now:
            raise ValueError(f"cannot schedule in the past ({tick} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (tick, self._seq, fn, arg))

    def after_event(self, index: int, fn: Callable[[], None]) -> None:
        """Run ``fn`` right after the ``index``-th event (1-based) is processed."""
        self._hooks.setdefault(index, []).append(fn)

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: Optional[int] = None, max_events: Optional[int] = None) -> None:
        heap = self._heap
        pop = heapq.heappop
        hooks = self._hooks
        limit = float("inf") if max_events is None else self.events + max_events
        while heap:
            if until is not None and heap[0][0] > until:
                break
            tick, _, fn, arg = pop(heap)
            self.now = tick
            fn(arg)
            self.events += 1
            if hooks:
                for hook in hooks.pop(self.events, ()):
                    hook()
            if self.events >= limit:
                break


class Network:
    """Delivers messages after a seeded uniform delay, FIFO per directed link.

    Delays are drawn from a stream per directed link, so traffic on one link
    never shifts the delays seen on another. Messages departing at or after
    the sender's death tick are dropped; messages already in flight arrive.
    Messages to a fenced node carry the sender's membership epoch so the
    receiver can hold them until it has caught up.
    """

    def __init__(self, sim: Simulator, ranges: Dict[str, Tuple[int, int]]):
        self.sim = sim
        self.ranges = dict(ranges)
        self.sent = 0
        self.max_delay = max(hi for _, hi in self.ranges.values())

    def send(self, src, dst, fn: Callable, arg, cls: str = "proxy", depart: Optional[int] = None) -> None:
        t0 = self.sim.now if depart is None else depart
        death = src.death_tick
        if death is not None and t0 >= death:
            return
        lo, hi = self.ranges[cls]
        stream = src.links.get(dst.name)
        if stream is None:
            stream = src.links[dst.name] = self.sim.uniform_stream(f"net/{src.name}->{dst.name}", 256)
        t = t0 + lo + int(stream.next() * (hi - lo + 1))
        last = src.last_delivery.get(dst.name)
        if last is not None and t < last:
            t = last
        src.last_delivery[dst.name] = t
        self.sent += 1
        sim = self.sim
        sim._seq += 1
        if dst.fenced:
            heapq.heappush(sim._heap, (t, sim._seq, dst.receive, (fn, arg, src.epoch)))
        else:
            heapq.heappush(sim._heap, (t, sim._seq, fn, arg))


class Node:
    """Base for every simulated process.

    A fenced node defers any message sent from a membership epoch it has not
    reached yet and replays it right after ``advance_epoch``.
    """

    fenced = False

    def __init__(self, name: str, sim: Simulator, net: Network, cost: int = 0):
        self.name = name
        self.sim = sim
        self.net = net
        self.cost = cost
        self.dead = False
        self.death_tick: Optional[int] = None
        self.ack_silent = False
        self.busy_until = 0
        self.busy_total = 0
        self.last_delivery: Dict[str, int] = {}
        self.links: Dict[str, UniformStream] = {}
        self.epoch = 0
        self.deferred: List[Tuple[Callable, object, int]] = []

    def receive(self, msg) -> None:
        if msg[2] > self.epoch:
            self.deferred.append(msg)
        else:
            msg[0](msg[1])

    def advance_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        if self.deferred:
            ready = [m for m in self.deferred if m[2] <= epoch]
            self.deferred = [m for m in self.deferred if m[2] > epoch]
            for fn, arg, _ in ready:
                fn(arg)

    def depart(self) -> int:
        """Account one unit of processing and return when its output leaves."""
        if self.cost == 0:
            return self.sim.now
        start = self.busy_until if self.busy_until > self.sim.now else self.sim.now
        self.busy_until = start + self.cost
        self.busy_total += self.cost
        return self.busy_until

    def kill(self) -> None:
        if not self.dead:
            self.dead = True
            if self.death_tick is None or self.death_tick > self.sim.now:
                self.death_tick = self.sim.now

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"
