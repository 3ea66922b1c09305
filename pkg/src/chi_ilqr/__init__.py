"""Convergent iLQR for hybrid systems."""

__version__ = "0.1.0"
