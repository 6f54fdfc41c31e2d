"""Lazily aggregated stochastic gradients: a deterministic parameter-server simulator."""

__version__ = "0.1.0"
