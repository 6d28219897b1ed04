"""Desk-scale supernet search engine with magnitude and perturbation-based selection."""

__version__ = "0.1.0"
