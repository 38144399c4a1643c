"""
Vanishing-viscosity spectral toolkit.

Modules:
- lattice: Fourier lattice bookkeeping, divergence-free fibers, projectors
- flows: catalog of steady divergence-free flows and their flow maps
- cocycle: bicharacteristic rays, the amplitude cocycle, Lyapunov exponents
- galerkin: Galerkin matrices of the linearized Euler / Navier-Stokes operators
- spectra: eigenvalues, Riesz projections, viscosity continuation, reduction determinant
- semigroup: propagators, pseudodifferential operators, wave-packet residuals
- config: process settings and validated run configuration
- logging_utils: structured logging helpers
- manifest: CSV tables and JSON run manifests
"""

__version__ = "0.1.0"

from .config import RunConfig, get_settings  # noqa: F401
