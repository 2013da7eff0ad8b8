"""Referential-comprehension instruction data from scene-graph and detection annotations."""

__version__ = "0.1.0"
