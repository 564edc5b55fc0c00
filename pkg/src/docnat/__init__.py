"""Sentence-aligned non-autoregressive document translation at desk scale."""

__version__ = "0.1.0"
