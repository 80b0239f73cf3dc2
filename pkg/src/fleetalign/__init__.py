"""Unsupervised feature alignment for one-class fault detection across a fleet of units."""

__version__ = "0.1.0"
