"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for user/config mistakes, 2 for bad input data, 3 for numerical or
internal failures.
"""


class GsrHypoError(Exception):
    exit_code = 3


class ConfigError(GsrHypoError, ValueError):
    exit_code = 1


class DataError(GsrHypoError):
    exit_code = 2


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class EmptyChannelError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateSignalError(DataError):
    pass


class InvalidGlucoseError(DataError, ValueError):
    pass


class InsufficientClassError(DataError):
    pass


class InvalidSplitError(GsrHypoError, ValueError):
    pass


class ShapeError(GsrHypoError, ValueError):
    pass


class NumericalError(GsrHypoError, ArithmeticError):
    pass


class UnstableMetricError(GsrHypoError):
    pass


class EmptyReportError(GsrHypoError):
    pass


def with_subject(err: GsrHypoError, subject_id: str) -> GsrHypoError:
    """Return a copy of ``err`` whose message names ``subject_id``."""
    new = type(err)(f"[subject {subject_id}] {err}")
    new.subject_id = subject_id
    return new
