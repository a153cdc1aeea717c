"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit with 2
(argparse's own convention), DataError with 3 and NumericalError with 4.
"""


class FepllError(Exception):
    """Base class for all errors raised by this package."""


class DataError(FepllError):
    """Invalid input data: malformed files, dimension mismatches, infeasible
    parameters, violated model invariants."""


class NumericalError(FepllError):
    """A numerical procedure failed in a way that invalidates the result
    (NaNs, non-finite objectives). CG non-convergence is *not* fatal and is
    reported through solve-info flags instead."""
