"""Linearizability checking for per-key read/write registers with unique
written values.

The fast checker builds, for every value, the cluster of the write that
produced it and the reads that returned it, and compares the time zones of
those clusters. It is exact for registers whose writes carry distinct
values. A brute-force search over linearization orders is provided as an
independent oracle for small histories.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

INF = math.inf


@dataclass(frozen=True)
class HistOp:
    """One completed (or pending) operation on a single key."""

    kind: str  # "read" | "write"
    value: Optional[bytes]  # written value, or value returned by a read
    invoke: float
    response: float  # INF when the operation never returned
    ident: object = None


@dataclass
class Violation:
    key: str
    reason: str
    ops: Tuple[object, ...]


def _zones(ops: Sequence[HistOp], initial: bytes) -> Tuple[Optional[str], List[Tuple[float, float, bool, bytes]]]:
    writes: Dict[bytes, HistOp] = {}
    for op in ops:
        if op.kind == "write":
            if op.value in writes or op.value == initial:
                return f"duplicate written value {op.value!r}", []
            writes[op.value] = op
    clusters: Dict[bytes, List[HistOp]] = {v: [w] for v, w in writes.items()}
    clusters.setdefault(initial, [])
    for op in ops:
        if op.kind != "read" or op.response == INF:
            continue
        if op.value not in clusters:
            return f"read returned a value never written: {op.value!r}", [(op.invoke, op.response, True, op.value)]
        w = writes.get(op.value)
        if w is not None and op.response < w.invoke:
            return f"read of {op.value!r} finished before its write started", []
        clusters[op.value].append(op)
    zones = []
    for value, members in clusters.items():
        if value == initial:
            members = [HistOp("write", initial, -INF, -INF)] + members
        if len(members) == 1 and members[0].kind == "write" and members[0].response == INF:
            continue  # a pending write nobody observed can be dropped
        lo = min(m.response for m in members)
        hi = max(m.invoke for m in members)
        zones.append((lo, hi, lo < hi, value))  # forward zone when lo < hi
    return None, zones


def check_register(ops: Sequence[HistOp], initial: bytes) -> Optional[str]:
    """Return None when the history is linearizable, else a reason."""
    err, zones = _zones(ops, initial)
    if err:
        return err
    forward = sorted((z for z in zones if z[2]), key=lambda z: z[0])
    for a, b in zip(forward, forward[1:]):
        if b[0] < a[1]:
            return f"overlapping forward zones for {a[3]!r} and {b[3]!r}"
    backward = [z for z in zones if not z[2]]
    if forward and backward:
        starts = [z[0] for z in forward]
        for lo, hi, _, value in backward:
            # backward zone spans [hi, lo]; it must not sit inside a forward zone [f_lo, f_hi]
            i = bisect.bisect_right(starts, hi) - 1
            if i >= 0:
                f_lo, f_hi, _, f_val = forward[i]
                if f_lo < hi and lo < f_hi and f_val != value:
                    return f"value {value!r} is overwritten by {f_val!r} within its own zone"
    return None


def brute_force_register(ops: Sequence[HistOp], initial: bytes) -> bool:
    """Exhaustive search over orders consistent with real time (small inputs)."""
    done = [op for op in ops if op.response != INF or op.kind == "write"]
    pending_writes = [op for op in done if op.response == INF]
    fixed = [op for op in done if op.response != INF]
    for r in range(len(pending_writes) + 1):
        for extra in itertools.combinations(pending_writes, r):
            if _search(list(fixed) + list(extra), initial):
                return True
    return False


def _search(ops: List[HistOp], initial: bytes) -> bool:
    n = len(ops)
    seen = set()

    def rec(remaining: frozenset, value: bytes) -> bool:
        if not remaining:
            return True
        state = (remaining, value)
        if state in seen:
            return False
        seen.add(state)
        min_resp = min(ops[i].response for i in remaining)
        for i in remaining:
            op = ops[i]
            if op.invoke > min_resp:
                continue  # some remaining op finished before this one started
            if op.kind == "read":
                if op.value == value and rec(remaining - {i}, value):
                    return True
            elif rec(remaining - {i}, op.value):
                return True
        return False

    return rec(frozenset(range(n)), initial)


def check_history(records: Iterable, initial_value) -> List[Violation]:
    """Check client ``OpRecord``s key by key; ``initial_value(key)`` gives the seed value."""
    by_key: Dict[str, List[HistOp]] = {}
    for rec in records:
        if rec.error:
            continue
        resp = INF if rec.response is None else rec.response
        value = rec.value if rec.kind == "write" else rec.result
        by_key.setdefault(rec.key, []).append(HistOp(rec.kind, value, rec.invoke, resp, rec.op_id))
    out = []
    for key, ops in sorted(by_key.items()):
        reason = check_register(ops, initial_value(key))
        if reason:
            out.append(Violation(key, reason, tuple(op.ident for op in ops)))
    return out
