"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError -> 1, EstimationError -> 2,
anything else -> 3.
"""


class SsateError(Exception):
    """Base class for all package errors."""


class InputError(SsateError, ValueError):
    """Invalid data, configuration or arguments."""


class EstimationError(SsateError, RuntimeError):
    """An estimator could not produce a value for otherwise valid input."""


class ResamplingError(EstimationError):
    """Too many degenerate perturbation draws, or too few valid ones."""


class BenchmarkError(EstimationError):
    """Too many failed replications in a Monte-Carlo experiment."""
