"""Sparse penalized nonlinear least squares: L1-ball constrained Levenberg-Marquardt."""

__version__ = "0.1.0"
