"""Learned, per-block token merging for a forward-only vision transformer."""

__version__ = "0.1.0"
