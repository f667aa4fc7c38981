"""Exception hierarchy shared by every module.

``DataError`` covers malformed input (bad files, shape mismatches, invariant
violations); ``NumericalError`` covers quantities that cannot be computed
from otherwise valid input (zero variance, rank deficiency, empty regions,
failed registration). The CLI maps the two families to distinct exit codes.
"""


class XrbmdError(Exception):
    """Base class for all package errors."""


class DataError(XrbmdError, ValueError):
    """Input data or configuration is invalid."""


class ParseError(DataError):
    """A structured text file could not be parsed.

    Attributes
    ----------
    key : str or None
        Header/config key the problem was found at.
    path : str or None
        File being parsed, when known.
    """

    def __init__(self, message, key=None, path=None):
        self.key = key
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class NumericalError(XrbmdError, ArithmeticError):
    """A requested quantity is undefined for the given data."""


class ZeroVarianceError(NumericalError):
    """Similarity or correlation requested on a constant signal."""


class RankDeficiencyError(NumericalError):
    """Least-squares fit on a degenerate design."""


class EmptyRegionError(NumericalError):
    """A threshold selected no pixels."""


class RegistrationError(NumericalError):
    """Registration could not produce a finite similarity anywhere."""
