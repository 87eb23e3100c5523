"""Volumetric sum-of-Gaussians actor capture from multi-view video."""

__version__ = "0.1.0"
