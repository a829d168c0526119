"""Deterministic-ODE posterior transport for deep Gaussian processes."""

__version__ = "0.1.0"
