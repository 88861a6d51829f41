"""Layered 2D blendshape face rigs fitted from a single aligned portrait."""

__version__ = "0.1.0"
