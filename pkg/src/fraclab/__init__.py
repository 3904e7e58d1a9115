"""Numerical laboratory for fractional Laplacians and related inverse problems."""

__version__ = "0.1.0"
