"""Termination prediction for a toy While-language under heavy class imbalance."""

__version__ = "0.1.0"
