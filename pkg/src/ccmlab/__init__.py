"""Endpoint-coordinate checkpoint merging for neural PDE surrogates."""

__version__ = "0.1.0"
