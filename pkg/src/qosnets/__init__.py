"""Approximate-multiplier operating points for 8-bit quantized networks."""

__version__ = "0.1.0"
