"""Cognition-graph-guided generation of deformable 4D Gaussian scenes."""

__version__ = "0.1.0"
