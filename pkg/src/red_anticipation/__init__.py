"""Reinforced encoder-decoder action anticipation on precomputed chunk features."""

__version__ = "0.1.0"
