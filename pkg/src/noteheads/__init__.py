"""Handwritten notehead detection on binary score images."""

__version__ = "0.1.0"
