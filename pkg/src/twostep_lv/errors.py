"""Exception hierarchy shared across the toolkit.

Fitting code distinguishes three failure families so that callers (and
the command-line front end) can react differently to each:

* ``DataError``: the inputs are malformed or inconsistent.  Nothing was
  estimated; fix the data or configuration and retry.
* ``ConvergenceError``: estimation ran but did not reach an acceptable
  solution.  The best iterate seen so far travels on the exception.
* ``NumericError``: a numeric operation broke down (non-finite values,
  singular or badly indefinite matrices).
"""

from __future__ import annotations


class TwoStepError(Exception):
    """Base class for all toolkit errors."""


class DataError(TwoStepError):
    """Malformed or inconsistent input data or configuration."""


class NumericError(TwoStepError):
    """Non-finite values or matrix operations that cannot proceed."""


class ConvergenceError(TwoStepError):
    """An iterative fit stopped without meeting its convergence rule.

    ``best`` carries the best solution object observed before the
    failure, when one exists, so callers can inspect or restart from it.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class SeparationError(ConvergenceError):
    """A coefficient ran away toward infinity during estimation.

    Typically caused by quasi-complete separation: some configuration of
    the data is predicted perfectly, so its coefficient has no finite
    maximizer.  ``name`` identifies the offending coordinate.
    """

    def __init__(self, message: str, name: str = "", value: float = 0.0, best=None):
        super().__init__(message, best=best)
        self.name = name
        self.value = value
