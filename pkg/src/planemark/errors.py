"""Exception types shared across the package.

The CLI maps these onto exit codes: DataFormatError -> 3, NumericsError
(including DegenerateFitError) -> 4.
"""


class PlanemarkError(Exception):
    pass


class DataFormatError(PlanemarkError, ValueError):
    """Malformed annotation records, count mismatches, bad file layouts."""


class NumericsError(PlanemarkError, RuntimeError):
    """Non-finite values or numerically unsolvable subproblems."""


class DegenerateFitError(NumericsError):
    """Least-squares fit with rank-deficient inputs (e.g. collinear points)."""
