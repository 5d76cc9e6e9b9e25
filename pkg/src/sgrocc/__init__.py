"""Semantic occupancy from posed depth via soft-gated lifting and a Gaussian memory pool."""

__version__ = "0.1.0"
