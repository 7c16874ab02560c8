"""Streaming federated learning with finite, rule-managed client caches."""

__version__ = "0.1.0"
