"""Numerical laboratory for optimal matching on the flat 2-torus."""
__version__ = "0.1.0"
