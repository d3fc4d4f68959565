"""Federated learning simulator with DRL-driven adaptive aggregation."""

__version__ = "0.1.0"
