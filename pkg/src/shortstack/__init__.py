"""Distributed frequency-smoothing proxy for an untrusted key-value store,
with a deterministic simulator for fault-injection experiments."""

__version__ = "0.1.0"
