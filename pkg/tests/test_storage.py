"""Transcript format and the in-memory store."""

import pytest
from hypothesis import given, strategies as st

from shortstack.crypto import CryptoSuite
from shortstack.pancake import AccessDistribution, plan_smoothing
from shortstack.storage import (
    InMemoryKVStore,
    Transcript,
    TranscriptFormatError,
    TranscriptRecord,
    snapshot_decrypt,
)

records = st.lists(st.builds(TranscriptRecord, st.integers(0, 10 ** 9), st.sampled_from(["L3.0", "L3.1", "init"]),
                             st.sampled_from(["get", "put", "insert"]), st.binary(min_size=16, max_size=16),
                             st.integers(0, 4096)), max_size=30)


@given(records)
def test_csv_round_trip(recs):
    t = Transcript(recs)
    assert list(Transcript.from_csv(t.to_csv())) == recs


def test_malformed_csv_rejected():
    with pytest.raises(TranscriptFormatError):
        Transcript.from_csv("1,L3.0,get,00,5\n1,L3.0,get,zz,5\n")
    with pytest.raises(TranscriptFormatError):
        Transcript.from_csv("1,L3.0,scan,00,5\n")


def populated(n=4):
    crypto = CryptoSuite.from_seed(3, value_size=32)
    plan = plan_smoothing(AccessDistribution.uniform([f"k{i}" for i in range(n)]))
    labels = {rep: l for rep, l in zip(plan.replicas, plan.labels(crypto))}
    t = Transcript()
    kv = InMemoryKVStore(t)
    kv.bulk_insert((l, crypto.encrypt_value(rep.key.encode(), l)) for rep, l in labels.items())
    return crypto, labels, t, kv


def test_init_records_2n_inserts():
    _, _, t, kv = populated(4)
    assert len(t) == 8 and {r.op for r in t} == {"insert"} and len(kv) == 8


def test_get_then_put_on_same_label():
    crypto, labels, t, kv = populated(4)
    label = next(iter(labels.values()))
    kv.put(label, crypto.encrypt_value(b"new", label), "L3.0")
    kv.get(label, "L3.0")
    assert [(r.op, r.label) for r in list(t)[-2:]] == [("put", label), ("get", label)]
    assert Transcript().to_csv() == ""


def test_snapshot_reports_corruption():
    crypto, labels, _, kv = populated(4)
    view, bad = snapshot_decrypt(kv, crypto, labels)
    assert not bad and len(view) == 8
    victim = next(iter(labels.values()))
    kv.put(victim, bytes(len(kv.raw(victim))))
    _, bad = snapshot_decrypt(kv, crypto, labels)
    assert [b.label for b in bad] == [victim]
