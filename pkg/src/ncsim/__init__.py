"""Conditional simulation of spatial random fields with masked score-based diffusion."""

__version__ = "0.1.0"
