"""Homodyne certification of Gaussian and linear-optical bosonic states."""

__version__ = "0.1.0"
