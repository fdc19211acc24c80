"""Batch quality control for whole-slide-image annotation campaigns."""

__version__ = "0.1.0"
