"""Encrypted KV backend and the transcript of what the storage provider sees."""

from __future__ import annotations

import abc
import csv
import io
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Tuple

from .crypto import AuthenticityError, CryptoSuite

OPS = ("get", "put", "insert")
TRANSCRIPT_FIELDS = ("tick", "server", "op", "label_hex", "value_len")


class TranscriptRecord(NamedTuple):
    tick: int
    server: str
    op: str
    label: bytes
    value_len: int

    def to_csv_row(self) -> str:
        return f"{self.tick},{self.server},{self.op},{self.label.hex()},{self.value_len}"


class TranscriptFormatError(ValueError):
    pass


class Transcript:
    """Ordered adversary view: one record per backend operation."""

    def __init__(self, records: Optional[Iterable[TranscriptRecord]] = None):
        self.records: List[TranscriptRecord] = list(records or [])

    def append(self, rec: TranscriptRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TranscriptRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def to_csv(self) -> str:
        return "".join(r.to_csv_row() + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "Transcript":
        out = cls()
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
            if not row:
                continue
            if len(row) != len(TRANSCRIPT_FIELDS):
                raise TranscriptFormatError(f"line {lineno}: expected 5 fields, got {len(row)}")
            tick, server, op, label_hex, value_len = row
            if op not in OPS:
                raise TranscriptFormatError(f"line {lineno}: unknown op {op!r}")
            try:
                out.append(TranscriptRecord(int(tick), server, op, bytes.fromhex(label_hex), int(value_len)))
            except ValueError as exc:
                raise TranscriptFormatError(f"line {lineno}: {exc}") from exc
        return out

    @classmethod
    def read(cls, path) -> "Transcript":
        with open(path) as fh:
            return cls.from_csv(fh.read())

    def access_counts(self, op: str = "get") -> Dict[bytes, int]:
        counts: Dict[bytes, int] = {}
        for r in self.records:
            if r.op == op:
                counts[r.label] = counts.get(r.label, 0) + 1
        return counts


class EncryptedKVStore(abc.ABC):
    """Single-key get/put/delete over opaque labels and ciphertexts."""

    @abc.abstractmethod
    def get(self, label: bytes, server: str = "") -> bytes: ...

    @abc.abstractmethod
    def put(self, label: bytes, ciphertext: bytes, server: str = "") -> None: ...

    @abc.abstractmethod
    def delete(self, label: bytes, server: str = "") -> None: ...

    @abc.abstractmethod
    def labels(self) -> List[bytes]: ...

    def bulk_insert(self, items: Iterable[Tuple[bytes, bytes]], server: str = "init") -> None:
        for label, ct in items:
            self.put(label, ct, server)


class InMemoryKVStore(EncryptedKVStore):
    """Dictionary backend that optionally reports every operation to a recorder.

    ``clock`` supplies ticks for the recorder (the simulator clock in sim mode).
    """

    def __init__(self, transcript: Optional[Transcript] = None, clock: Callable[[], int] = lambda: 0):
        self._data: Dict[bytes, bytes] = {}
        self.transcript = transcript
        self.clock = clock

    def _record(self, server: str, op: str, label: bytes, length: int) -> None:
        if self.transcript is not None:
            self.transcript.append(TranscriptRecord(self.clock(), server, op, label, length))

    def get(self, label: bytes, server: str = "") -> bytes:
        value = self._data[label]
        self._record(server, "get", label, len(value))
        return value

    def put(self, label: bytes, ciphertext: bytes, server: str = "") -> None:
        self._data[label] = ciphertext
        self._record(server, "put", label, len(ciphertext))

    def delete(self, label: bytes, server: str = "") -> None:
        del self._data[label]

    def bulk_insert(self, items: Iterable[Tuple[bytes, bytes]], server: str = "init") -> None:
        for label, ct in items:
            self._data[label] = ct
            self._record(server, "insert", label, len(ct))

    def labels(self) -> List[bytes]:
        return list(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def raw(self, label: bytes) -> bytes:
        """Read without recording (trusted-side test utility)."""
        return self._data[label]


@dataclass
class CorruptionReport:
    label: bytes
    reason: str


def snapshot_decrypt(kv: InMemoryKVStore, crypto: CryptoSuite,
                     label_map: Mapping[object, bytes]) -> Tuple[Dict[object, bytes], List[CorruptionReport]]:
    """Decrypt every replica named in ``label_map`` (replica -> label).

    Returns the plaintext view plus a list of labels that failed
    authentication or are missing.
    """
    view: Dict[object, bytes] = {}
    bad: List[CorruptionReport] = []
    for replica, label in label_map.items():
        try:
            view[replica] = crypto.decrypt_value(kv.raw(label), label)
        except KeyError:
            bad.append(CorruptionReport(label, "missing"))
        except AuthenticityError as exc:
            bad.append(CorruptionReport(label, str(exc)))
    return view, bad
