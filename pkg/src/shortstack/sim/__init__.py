"""Discrete-event simulation of the three-layer proxy, reference models and
security games."""
