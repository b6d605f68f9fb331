"""Attention mechanisms with analytic gradients, locality diagnostics and
scaling benchmarks."""

__version__ = "0.1.0"
