"""Bayesian segmentation networks with Monte-Carlo uncertainty and calibration."""

__version__ = "0.1.0"
