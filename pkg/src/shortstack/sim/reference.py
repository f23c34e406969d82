"""Reference models of what each L3 server sends to the store.

``process_reference`` produces per-server access sequences for a healthy
run, ``interleave`` merges queues with a permutation that depends only on
the generator state and the queue lengths, and ``transform_reference``
rewrites healthy sequences into the ones a run with L3 failures produces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, Mapping, Sequence

import numpy as np

from ..cluster import FailureEvent, shuffled_replay_order
from ..hashing import HashRing


@dataclass(frozen=True)
class Access:
    """One label access issued by an L3 server at ``tick``."""

    tick: int
    label: bytes


def interleave(queues: Sequence[Sequence], rng: np.random.Generator) -> List:
    """Merge queues, keeping each queue's internal order.

    The merge pattern is a uniform shuffle of queue indices, so it is a
    function of ``rng`` and the queue lengths only, never of the contents.
    """
    pattern = np.repeat(np.arange(len(queues)), [len(q) for q in queues])
    rng.shuffle(pattern)
    pos = [0] * len(queues)
    out = []
    for qi in pattern.tolist():
        out.append(queues[qi][pos[qi]])
        pos[qi] += 1
    return out


def process_reference(batches: Iterable[Sequence[tuple]], ring: HashRing,
                      rng: np.random.Generator, service: int = 1) -> Dict[Hashable, List[Access]]:
    """Healthy-run reference: route every batch element to its ring owner.

    ``batches`` yields sequences of ``(l2_chain, label)``. Each server's
    per-chain queues are merged with :func:`interleave` and stamped with
    consecutive issue ticks ``service`` apart.
    """
    queues: Dict[Hashable, Dict[Hashable, List[bytes]]] = {s: {} for s in ring.servers}
    for batch in batches:
        for chain, label in batch:
            queues[ring.owner(label)].setdefault(chain, []).append(label)
    out = {}
    for server in ring.servers:
        per_chain = [queues[server][c] for c in sorted(queues[server], key=repr)]
        merged = interleave(per_chain, rng)
        out[server] = [Access(i * service, lbl) for i, lbl in enumerate(merged)]
    return out


def beta_from_issues(issues: Iterable[tuple], servers: Iterable[Hashable]) -> Dict[Hashable, List[Access]]:
    """Per-server access sequences from an audit issue log."""
    out: Dict[Hashable, List[Access]] = {s: [] for s in servers}
    for tick, server, _seq, _batch, _gen, label, *_ in issues:
        out.setdefault(server, []).append(Access(tick, label))
    return out


def transform_reference(beta: Mapping[Hashable, Sequence[Access]], events: Sequence[FailureEvent],
                        healthy: Sequence[Hashable], ring: HashRing,
                        rng: np.random.Generator) -> Dict[Hashable, List[Access]]:
    """Apply L3 failure events, earliest first, to healthy sequences.

    For an event ``(n, t, gamma, r)`` the dead server keeps its accesses up
    to ``t``. Its accesses after the last acknowledged one (tick ``t - gamma``)
    are re-sent: they are split by the ring without ``n``, shuffled, stamped
    ``t + r`` and interleaved into each new owner's accesses after ``t + r``.
    Events for servers outside ``healthy`` (such as proxy failures) are skipped.
    """
    tau = {s: list(seq) for s, seq in beta.items()}
    live = list(healthy)
    cur_ring = ring
    for ev in sorted(events, key=lambda e: e.t):
        if ev.n not in live:
            continue  # not a live L3 server: proxy failures leave the store traffic alone
        dead = tau.get(ev.n, [])
        acked_until = ev.t - ev.gamma
        kept = [a for a in dead if a.tick <= ev.t]
        resend = [a for a in dead if a.tick > acked_until]
        live.remove(ev.n)
        survivor = cur_ring.without(ev.n)
        moved: Dict[Hashable, List[Access]] = {s: [] for s in live}
        recover = ev.t + ev.r
        for a in resend:
            moved[survivor.owner(a.label)].append(Access(recover, a.label))
        tau[ev.n] = kept
        for s in live:
            mine = moved[s]
            if not mine:
                continue
            order = shuffled_replay_order([a.label for a in mine], rng)
            mine = [mine[i] for i in order]
            seq = tau.get(s, [])
            pre = [a for a in seq if a.tick <= recover]
            post = [a for a in seq if a.tick > recover]
            tau[s] = pre + interleave([post, mine], rng)
        cur_ring = survivor
    return tau


def label_counts(tau: Mapping[Hashable, Sequence[Access]]) -> Dict[bytes, int]:
    counts: Dict[bytes, int] = {}
    for seq in tau.values():
        for a in seq:
            counts[a.label] = counts.get(a.label, 0) + 1
    return counts
