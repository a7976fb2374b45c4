"""Federated variable selection by componentwise boosting on aggregates."""

__version__ = "0.1.0"
