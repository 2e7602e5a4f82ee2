"""Effective potentials from large-step damped dynamics."""

__version__ = "0.1.0"
