"""Desk-scale lab for frozen orthogonal cosine heads in a dense detector."""

__version__ = "0.1.0"
