"""Numerical laboratory for the stochastic heat equation on a truncated line."""

__version__ = "0.1.0"
