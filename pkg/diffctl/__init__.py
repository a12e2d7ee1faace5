"""Differentiable trajectory optimization, system identification and end-to-end planning."""

__version__ = "1.0.0"
