"""Numerical laboratory for scenario-driven G-Brownian ensembles, the
quasilinear SPDEs they drive, and the associated backward doubly stochastic
equations solved by regression Monte Carlo."""

__version__ = "0.1.0"
