"""Coarse-grid stochastic-transport data assimilation for 2D Euler flows."""

__version__ = "0.1.0"
