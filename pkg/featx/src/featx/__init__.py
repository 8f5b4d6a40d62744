"""Offline image feature extraction with frozen encoders."""

__version__ = "0.1.0"
