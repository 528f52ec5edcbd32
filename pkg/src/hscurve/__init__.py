"""Numerical laboratory for the perturbed Hardy-Sobolev problem with a curve singularity."""

__version__ = "0.1.0"
