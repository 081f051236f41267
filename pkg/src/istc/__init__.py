"""Positive l1 sparse coding by homotopy thresholding."""
__version__ = "0.1.0"
