"""Kac-Rice cumulant densities, their factorization, and Monte Carlo checks
for nodal statistics of smooth stationary Gaussian fields."""

__version__ = "0.1.0"
