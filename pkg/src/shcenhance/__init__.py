"""Spherical-harmonic-domain hierarchical multichannel speech enhancement."""
__version__ = "0.1.0"
