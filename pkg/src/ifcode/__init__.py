"""Continuous-fidelity coregionalization: neural-ODE surrogates for multi-fidelity PDE fields."""

__version__ = "0.1.0"
