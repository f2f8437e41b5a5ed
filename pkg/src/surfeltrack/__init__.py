"""Surfel-based tracking of deforming RGB-D scenes with semantic weighting."""

__version__ = "0.1.0"
