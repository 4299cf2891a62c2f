"""Sparse mixture-of-experts routing for a toy vision transformer."""

__version__ = "0.1.0"
