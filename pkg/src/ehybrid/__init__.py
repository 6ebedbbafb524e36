"""Scattering features fused into a convolutional backbone."""

__version__ = "0.1.0"
