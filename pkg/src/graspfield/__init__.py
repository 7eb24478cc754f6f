"""Grasp-success neural fields and gradient-based grasp pose search."""

__version__ = "0.1.0"
