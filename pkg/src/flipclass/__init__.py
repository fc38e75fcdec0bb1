"""Hopfield-energy teacher-student attention alignment for generalized
category discovery, at desk scale."""

__version__ = "0.1.0"
