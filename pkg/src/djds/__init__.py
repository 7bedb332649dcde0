"""Symbolic safety controllers for linear delayed jump-diffusion systems."""

__version__ = "0.1.0"
