"""Federated learning simulator with affinity-weighted multi-teacher distillation."""

__version__ = "0.1.0"
