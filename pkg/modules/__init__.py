"""Interpolative-decomposition pruning toolkit."""

__version__ = "1.0.0"
