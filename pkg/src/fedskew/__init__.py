"""Deterministic federated-learning simulator with loss-skewed aggregation
strategies and convergence-bound diagnostics."""

__version__ = "0.1.0"

from .backend import active_backend

__all__ = ["active_backend", "__version__"]
