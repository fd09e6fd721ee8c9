"""Allocation of a fixed supply across markets under a binding price ceiling."""

__version__ = "0.1.0"
