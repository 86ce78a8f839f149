"""Spectral Galerkin laboratory for the viscous, non-diffusive Boussinesq system."""

__version__ = "0.1.0"
