"""Interpretable feedback codes for the AWGN channel with passive feedback."""

__version__ = "0.1.0"
