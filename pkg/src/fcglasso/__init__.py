"""Sparse-plus-low-rank precision estimation for forecast combination."""

__version__ = "0.1.0"
