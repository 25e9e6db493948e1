"""Numerical laboratory for Hormander-type phases satisfying Bourgain's condition."""

__version__ = "0.1.0"
