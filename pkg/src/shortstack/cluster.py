"""Membership, failure schedules, L3 failover and shuffled replay."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence

import numpy as np

from .chain import ChainChange, ChainConfig
from .hashing import HashRing

log = logging.getLogger(__name__)

MODE_KILL = "kill"
MODE_SUSPECT = "suspect"  # master wrongly declares a live server dead


def l1_name(chain: int, idx: int) -> str:
    return f"L1.{chain}.{idx}"


def l2_name(chain: int, idx: int) -> str:
    return f"L2.{chain}.{idx}"


def l3_name(i: int) -> str:
    return f"L3.{i}"


def layer_of(server: str) -> str:
    return server.split(".", 1)[0]


def chain_of(server: str) -> int:
    return int(server.split(".")[1])


@dataclass(frozen=True)
class FailureEvent:
    """Realized failure as the adversary characterizes it.

    ``t`` is the tick of the last request the server issued, ``t - gamma``
    the tick of the last request it acknowledged and ``r`` the time until
    the rest of the system reacted.
    """

    n: str
    t: int
    gamma: int
    r: int

    def __post_init__(self):
        if self.gamma < 0 or self.r < 0:
            raise ValueError("gamma and r must be non-negative")


@dataclass(frozen=True)
class FailureInjection:
    """One scheduled failure.

    The server stops acknowledging at ``fire_time - gamma``, stops entirely
    at ``fire_time`` and the master notices ``r`` ticks later (or after the
    heartbeat timeout when ``r`` is None). ``mode == "suspect"`` leaves the
    server running and only makes the master declare it dead.
    """

    server: str
    fire_time: int
    gamma: int = 0
    r: Optional[int] = None
    mode: str = MODE_KILL

    def __post_init__(self):
        if self.gamma < 0 or (self.r is not None and self.r < 0) or self.fire_time < 0:
            raise ValueError("fire_time, gamma and r must be non-negative")
        if self.mode not in (MODE_KILL, MODE_SUSPECT):
            raise ValueError(f"unknown failure mode {self.mode!r}")


class ScheduleFormatError(ValueError):
    pass


def parse_schedule(text: str) -> List[FailureInjection]:
    """Parse a failure schedule.

    One record per line: ``server fire_time gamma r [mode]``. ``r`` may be
    ``-`` for heartbeat detection. Blank lines and ``#`` comments are ignored.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise ScheduleFormatError(f"line {lineno}: expected 4 or 5 fields, got {len(parts)}")
        try:
            r = None if parts[3] == "-" else int(parts[3])
            rec = FailureInjection(parts[0], int(parts[1]), int(parts[2]), r,
                                   parts[4] if len(parts) == 5 else MODE_KILL)
        except ValueError as exc:
            raise ScheduleFormatError(f"line {lineno}: {exc}") from exc
        out.append(rec)
    out.sort(key=lambda e: e.fire_time)
    return out


def format_schedule(events: Iterable[FailureInjection]) -> str:
    buf = io.StringIO()
    buf.write("# server fire_time gamma r mode\n")
    for e in events:
        buf.write(f"{e.server} {e.fire_time} {e.gamma} {'-' if e.r is None else e.r} {e.mode}\n")
    return buf.getvalue()


def heartbeat_detection_tick(fire_time: int, interval: int, misses: int) -> int:
    """Tick at which the master declares a server dead.

    Heartbeats are due at multiples of ``interval``; the server is declared
    dead at the ``misses``-th consecutive missed beat, so the detection delay
    never exceeds ``interval * misses``.
    """
    first_missed = (fire_time // interval + 1) * interval
    return first_missed + (misses - 1) * interval


@dataclass
class MembershipChange:
    epoch: int
    server: str
    layer: str
    chain_change: Optional[ChainChange] = None
    moved_labels: Dict[bytes, str] = field(default_factory=dict)


class Membership:
    """The master's authoritative view: live chains, live L3s and the ring."""

    def __init__(self, l1: Dict[int, List[str]], l2: Dict[int, List[str]], l3: Sequence[str],
                 ring: HashRing):
        self.epoch = 0
        self.l1 = {c: ChainConfig(c, list(r)) for c, r in l1.items()}
        self.l2 = {c: ChainConfig(c, list(r)) for c, r in l2.items()}
        self.l3 = list(l3)
        self.ring = ring
        self.removed: List[str] = []

    def chain(self, layer: str, chain_id: int) -> ChainConfig:
        return (self.l1 if layer == "L1" else self.l2)[chain_id]

    def is_live(self, server: str) -> bool:
        layer = layer_of(server)
        if layer == "L3":
            return server in self.l3
        if layer in ("L1", "L2"):
            cfg = self.chain(layer, chain_of(server))
            return server in cfg.replicas
        return True

    def remove(self, server: str, labels: Iterable[bytes] = ()) -> MembershipChange:
        layer = layer_of(server)
        if not self.is_live(server):
            raise KeyError(f"{server} is not a live member")
        self.epoch += 1
        self.removed.append(server)
        change = MembershipChange(self.epoch, server, layer)
        if layer == "L3":
            if len(self.l3) == 1:
                raise RuntimeError("cannot remove the last L3 server")
            change.moved_labels = l3_failover(self.ring, server, labels)
            self.l3.remove(server)
            self.ring = self.ring.without(server)
        else:
            change.chain_change = self.chain(layer, chain_of(server)).failover(server)
        log.debug("epoch %d: removed %s", self.epoch, server)
        return change

    def copy(self) -> "Membership":
        """Independent replica of this view (for a node's local copy)."""
        out = Membership({c: cfg.replicas for c, cfg in self.l1.items()},
                         {c: cfg.replicas for c, cfg in self.l2.items()}, self.l3, self.ring)
        out.epoch = self.epoch
        out.removed = list(self.removed)
        return out

    def apply(self, change: MembershipChange) -> None:
        """Bring a local copy up to date with a change the master announced."""
        if change.epoch != self.epoch + 1:
            raise ValueError(f"epoch {change.epoch} applied to view at epoch {self.epoch}")
        self.epoch = change.epoch
        self.removed.append(change.server)
        if change.layer == "L3":
            self.l3.remove(change.server)
            self.ring = self.ring.without(change.server)
        else:
            self.chain(change.layer, chain_of(change.server)).failover(change.server)


def l3_failover(ring: HashRing, failed: Hashable, labels: Iterable[bytes]) -> Dict[bytes, Hashable]:
    """New owner for each label the failed server owned; nothing else moves."""
    survivor = ring.without(failed)
    return {lbl: survivor.owner(lbl) for lbl in labels if ring.owner(lbl) == failed}


def shuffled_replay_order(labels: Sequence[bytes], rng: np.random.Generator) -> List[int]:
    """Order in which to replay buffered requests.

    Draws a uniform permutation of positions (a function of the generator
    state and the length only) and then hands each label's positions to
    that label's requests in their original order. The label sequence is
    therefore uniformly shuffled while writes to one label keep their order.
    """
    m = len(labels)
    perm = rng.permutation(m).tolist()
    slots_by_label: Dict[bytes, List[int]] = {}
    for pos, src in enumerate(perm):
        slots_by_label.setdefault(labels[src], []).append(pos)
    order: List[Optional[int]] = [None] * m
    seen: Dict[bytes, int] = {}
    for i, lbl in enumerate(labels):
        k = seen.get(lbl, 0)
        order[slots_by_label[lbl][k]] = i
        seen[lbl] = k + 1
    return order  # type: ignore[return-value]
