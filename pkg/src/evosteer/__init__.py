"""Evolutionary diffusion steering of a frozen diffusion policy."""

__version__ = "0.1.0"
