"""Post-run invariant checks over the audit log and the store transcript.

Every check returns an :class:`InvariantResult` naming the invariant and,
on failure, the offending record indices.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

from ..pancake import DUMMY_KEY
from .linearizability import check_history
from .scenario import RunResult, initial_value


@dataclass
class InvariantResult:
    name: str
    passed: bool
    detail: str = ""
    records: List[object] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f": {self.detail}" if self.detail else ""
        return f"{status} {self.name}{extra}"


def check_batch_atomicity(result: RunResult) -> InvariantResult:
    """Each batch reaches the store with either none or all of its requests."""
    seen: Dict[object, set] = defaultdict(set)
    where: Dict[object, List[int]] = defaultdict(list)
    for i, (_, _, seq, batch_id, _) in enumerate(result.audit.arrivals):
        seen[batch_id].add(seq)
        where[batch_id].append(i)
    bad = []
    for batch_id, (_, _, size, _) in result.audit.batches.items():
        got = len(seen.get(batch_id, ()))
        if 0 < got < size:
            bad.append((batch_id, got, size, where[batch_id][:size]))
    detail = "" if not bad else f"{len(bad)} partial batch(es), first {bad[0][0]} with {bad[0][1]}/{bad[0][2]}"
    return InvariantResult("batch_atomicity", not bad, detail, bad)


def check_cut_points(result: RunResult) -> InvariantResult:
    """Every generation switch separates old and new requests at the store."""
    arrivals = result.audit.arrivals
    gens = sorted(result.cluster.gens)
    bad = []
    for g in gens[1:]:
        last_old = max((i for i, a in enumerate(arrivals) if a[4] < g), default=-1)
        first_new = min((i for i, a in enumerate(arrivals) if a[4] >= g), default=len(arrivals))
        if last_old > first_new:
            bad.append((g, first_new, last_old))
    detail = "" if not bad else f"generation {bad[0][0]}: new arrival #{bad[0][1]} precedes old arrival #{bad[0][2]}"
    return InvariantResult("cut_point", not bad, detail, bad)


def check_replica_total(result: RunResult) -> InvariantResult:
    """Every generation maps exactly the original 2n labels."""
    gens = result.cluster.gens
    base = set(gens[0].label_map.values())
    n = result.cluster.config.workload.n
    bad = [g for g, gen in sorted(gens.items())
           if len(gen.label_map) != 2 * n or set(gen.label_map.values()) != base]
    return InvariantResult("replica_total", not bad, "" if not bad else f"generations {bad}", bad)


def check_read_then_write(result: RunResult) -> InvariantResult:
    """Per server and label the store sees get, put, get, put, ...

    A trailing unmatched get is allowed only for a server that failed.
    """
    failed = {inj.server for inj in result.cluster.schedule}
    expect_put: Dict[tuple, int] = {}
    bad = []
    for i, rec in enumerate(result.transcript):
        if rec.op == "insert":
            continue
        k = (rec.server, rec.label)
        if rec.op == "get":
            if k in expect_put:
                bad.append(i)
            expect_put[k] = i
        elif rec.op == "put":
            if expect_put.pop(k, None) is None:
                bad.append(i)
    bad += [i for (server, _), i in expect_put.items() if server not in failed]
    bad.sort()
    return InvariantResult("read_then_write", not bad, "" if not bad else f"records {bad[:5]}", bad)


def check_single_owner(result: RunResult) -> InvariantResult:
    """Each label is served by one server at a time.

    A label may move only from a declared-dead server to that server's ring
    successor, and only after the declaration.
    """
    cl = result.cluster
    declared = {c.server: (t, c) for t, c in result.audit.epochs if c.layer == "L3"}
    ring = cl.initial_ring
    owner: Dict[bytes, str] = {}
    bad = []
    for i, rec in enumerate(result.transcript):
        if rec.op != "get":
            continue
        cur = owner.get(rec.label)
        if cur is None:
            cur = ring.owner(rec.label)
            owner[rec.label] = cur
        while cur != rec.server and cur in declared and declared[cur][0] <= rec.tick:
            nxt = declared[cur][1].moved_labels.get(rec.label)
            if nxt is None:
                break
            cur = nxt
        if cur != rec.server:
            bad.append(i)
        else:
            owner[rec.label] = cur
    return InvariantResult("single_owner", not bad, "" if not bad else f"records {bad[:5]}", bad)


def check_leakage_hygiene(result: RunResult) -> InvariantResult:
    """The transcript carries only the five declared fields, equal value
    lengths and known labels; no plaintext key appears in it."""
    text = result.transcript.to_csv()
    problems = []
    lengths = set()
    labels = {lbl.hex() for lbl in result.cluster.gens[0].label_map.values()}
    for i, row in enumerate(text.splitlines()):
        parts = row.split(",")
        if len(parts) != 5:
            problems.append((i, "field count"))
            continue
        if parts[3] not in labels:
            problems.append((i, "unknown label"))
        lengths.add(parts[4])
    if len(lengths) > 1:
        problems.append((-1, f"value lengths {sorted(lengths)}"))
    keys = result.cluster.config.workload.keys
    for key in keys[: min(len(keys), 64)]:
        if key in text:
            problems.append((-1, f"plaintext key {key}"))
    if DUMMY_KEY in text:
        problems.append((-1, "dummy marker"))
    return InvariantResult("leakage_hygiene", not problems, "" if not problems else str(problems[:3]), problems)


def check_linearizable(result: RunResult) -> InvariantResult:
    violations = check_history(result.audit.history, initial_value)
    detail = "" if not violations else f"{len(violations)} key(s), first {violations[0].key}: {violations[0].reason}"
    return InvariantResult("linearizable", not violations, detail, violations)


def check_completion(result: RunResult) -> InvariantResult:
    """Every client operation received a reply."""
    missing = [r.op_id for r in result.audit.history if r.response is None]
    return InvariantResult("completion", not missing, "" if not missing else f"{len(missing)} pending", missing)


ALL_CHECKS = (
    check_batch_atomicity,
    check_cut_points,
    check_replica_total,
    check_read_then_write,
    check_single_owner,
    check_leakage_hygiene,
    check_linearizable,
    check_completion,
)


def invariant_suite(result: RunResult, checks: Sequence = ALL_CHECKS) -> List[InvariantResult]:
    return [check(result) for check in checks]
