"""YCSB-style workload description and generators."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Iterator, List, Tuple

import numpy as np

from .pancake import AccessDistribution


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field or line."""


def key_name(i: int) -> str:
    return f"k{i:07d}"


def zipf_probs(n: int, s: float) -> np.ndarray:
    """Zipf mass over ranks 1..n with exponent ``s`` (s = 0 is uniform)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if s < 0:
        raise ValueError("skew must be >= 0")
    w = np.arange(1, n + 1, dtype=float) ** (-s)
    return w / w.sum()


def zipf_distribution(n: int, s: float) -> AccessDistribution:
    keys = [key_name(i) for i in range(n)]
    return AccessDistribution.from_weights(keys, zipf_probs(n, s))


@dataclass
class WorkloadSpec:
    n: int = 1000
    value_size: int = 256
    read_fraction: float = 0.5
    skew: float = 0.99
    q: int = 100_000
    clients: int = 16

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError("workload.n: must be a positive integer")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ConfigError("workload.read_fraction: must be in [0, 1]")
        if self.skew < 0:
            raise ConfigError("workload.skew: must be >= 0")
        if self.q < 0:
            raise ConfigError("workload.q: must be >= 0")
        if self.clients < 1:
            raise ConfigError("workload.clients: must be >= 1")
        if self.value_size < 8:
            raise ConfigError("workload.value_size: must be >= 8")

    @property
    def keys(self) -> List[str]:
        return [key_name(i) for i in range(self.n)]

    def distribution(self) -> AccessDistribution:
        return zipf_distribution(self.n, self.skew)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkloadSpec":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"workload: unknown field(s) {sorted(extra)}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "WorkloadSpec":
        return cls.from_dict(json.loads(text))


def generate_ops(spec: WorkloadSpec, rng: np.random.Generator,
                 probs: np.ndarray = None) -> Iterator[Tuple[str, str]]:
    """Yield ``(kind, key)`` pairs; ``kind`` is ``"read"`` or ``"write"``."""
    p = spec.distribution().vector() if probs is None else probs
    keys = spec.keys
    idx = rng.choice(spec.n, size=spec.q, p=p)
    reads = rng.random(spec.q) < spec.read_fraction
    for i, r in zip(idx.tolist(), reads.tolist()):
        yield ("read" if r else "write"), keys[i]
