"""Crash contributing-factor risk modeling pipeline."""

__version__ = "0.1.0"
