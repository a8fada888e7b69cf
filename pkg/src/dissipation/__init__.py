"""Simulation and numerical-verification toolkit for mass dissipation in
lattice stochastic heat equations and their continuum limit."""

__version__ = "0.1.0"
