"""Gaussian graphical regression with covariate-dependent precision matrices."""

__version__ = "0.1.0"
