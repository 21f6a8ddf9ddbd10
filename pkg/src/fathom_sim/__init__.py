"""Deterministic federated-optimization simulator: FedAvg and FATHOM."""

__version__ = "0.1.0"
