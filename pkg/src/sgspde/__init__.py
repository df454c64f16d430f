"""Numerical toolkit for semilinear parabolic SPDEs with SG pseudodifferential generators."""

__version__ = "0.1.0"
