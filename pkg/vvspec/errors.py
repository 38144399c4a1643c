"""
Shared exception roots.

Modules define their own narrow exceptions next to the code that raises them;
these roots let the CLI map failures to exit codes without importing every
module's error types.
"""

from __future__ import annotations


class NumericalFailure(RuntimeError):
    """A computation broke down (integrator, eigensolver, quadrature, overflow)."""


class HypothesisNotSatisfied(RuntimeError):
    """The unstable set above the essential-spectrum bound is empty.

    Not a tool failure: the convergence statement being checked is conditional.
    """


class ConfigError(ValueError):
    """Raised when a run configuration cannot be loaded or is inconsistent."""
