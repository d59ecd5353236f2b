"""Detect, attribute and cost out in-browser cryptocurrency miners."""

__version__ = "0.1.0"
