"""Simulation and verification toolkit for stochastic Hamiltonian dynamics
on phase space and the density manifold, driven by piecewise-linear
approximations of Brownian motion."""

__version__ = "0.1.0"
