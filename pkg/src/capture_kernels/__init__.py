"""Infinite-width transformer kernels, task generators and a capture harness."""

__version__ = "0.1.0"
