"""Numerical workbench for exact boundary control of layered exterior wave problems."""
__version__ = "0.1.0"
