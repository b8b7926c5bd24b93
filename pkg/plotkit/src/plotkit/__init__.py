"""Batch figure renderer for valleysim output files."""

__version__ = "0.1.0"
