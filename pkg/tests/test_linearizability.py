"""The zone-based register checker against exhaustive search."""

from dataclasses import dataclass
from typing import Optional

from hypothesis import given, settings, strategies as st

from shortstack.sim.linearizability import INF, HistOp, brute_force_register, check_history, check_register

INIT = b"init"


@st.composite
def histories(draw):
    n = draw(st.integers(1, 7))
    ops = []
    writes = 0
    for i in range(n):
        invoke = draw(st.integers(0, 12))
        dur = draw(st.integers(0, 6))
        if draw(st.booleans()):
            writes += 1
            pending = draw(st.integers(0, 5)) == 0
            ops.append(HistOp("write", f"w{writes}".encode(), invoke, INF if pending else invoke + dur, i))
        else:
            ops.append(("read", invoke, invoke + dur, i))
    values = [INIT] + [f"w{j}".encode() for j in range(1, writes + 1)]
    out = []
    for op in ops:
        if isinstance(op, tuple):
            _, inv, resp, ident = op
            out.append(HistOp("read", draw(st.sampled_from(values)), inv, resp, ident))
        else:
            out.append(op)
    return out


@settings(max_examples=3000)
@given(histories())
def test_zone_checker_agrees_with_search(ops):
    assert (check_register(ops, INIT) is None) == brute_force_register(ops, INIT)


def test_simple_cases():
    w = HistOp("write", b"x", 0, 2)
    assert check_register([w, HistOp("read", b"x", 3, 4)], INIT) is None
    assert check_register([w, HistOp("read", INIT, 3, 4)], INIT) is not None  # stale read
    assert check_register([w, HistOp("read", INIT, 1, 4)], INIT) is None  # concurrent read
    assert check_register([HistOp("read", b"ghost", 0, 1)], INIT) is not None
    assert check_register([HistOp("write", b"x", 0, INF), HistOp("read", b"x", 5, 6)], INIT) is None


@dataclass
class Rec:
    client: int
    op_id: tuple
    kind: str
    key: str
    value: Optional[bytes]
    invoke: int
    response: Optional[int]
    result: Optional[bytes]
    error: Optional[str] = None


def test_history_grouped_by_key():
    recs = [Rec(0, (0, 0), "write", "a", b"1", 0, 5, None),
            Rec(1, (1, 0), "read", "a", None, 6, 8, b"init:a"),
            Rec(1, (1, 1), "read", "b", None, 6, 8, b"init:b")]
    bad = check_history(recs, lambda k: b"init:" + k.encode())
    assert [v.key for v in bad] == ["a"]
