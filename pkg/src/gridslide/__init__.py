"""Slide-level representation learning over 2D grids of patch features."""

__version__ = "0.1.0"
