"""Jacobian-based capacity audits for bias-free ReLU networks."""

__version__ = "0.1.0"
