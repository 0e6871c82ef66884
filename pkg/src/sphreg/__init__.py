"""Spherical mesh registration toolkit."""

__version__ = "0.1.0"
