"""Cooperative 3D detection by exchanging top-k object queries between vehicles."""

__version__ = "0.1.0"
