"""Numerical toolkit for geodesic segments, loops and orthogonal chords:
shooting boundary value solvers, Jacobi fields, intersection detection and
localized metric perturbations."""

__version__ = "0.1.0"
