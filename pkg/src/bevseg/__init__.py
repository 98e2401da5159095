"""Desk-scale bird's-eye-view map segmentation toolkit."""

__version__ = "0.1.0"
