"""Probabilistic hierarchical Laplacian-pyramid registration with stationary velocity fields."""

__version__ = "0.1.0"
