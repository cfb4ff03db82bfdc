"""Robust clustering of Gaussian mixtures with sum-of-squares relaxations."""
__version__ = "0.1.0"
