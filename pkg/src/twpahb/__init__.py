"""Harmonic-balance simulation of Josephson traveling-wave parametric amplifiers."""

__version__ = "0.1.0"
