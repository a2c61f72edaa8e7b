"""Exception types shared across the toolkit.

The CLI maps ValidationError to exit code 2 and NumericalError to exit
code 3; everything else is a bug and propagates.
"""


class ValidationError(ValueError):
    """Bad inputs: malformed files, violated preconditions, domain errors."""


class NumericalError(RuntimeError):
    """Numerical failure at runtime: NaN/Inf losses, diverging training."""
