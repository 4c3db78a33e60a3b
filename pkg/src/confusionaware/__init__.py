"""Confusion-aware two-stream fusion training toolkit."""

__version__ = "0.1.0"
