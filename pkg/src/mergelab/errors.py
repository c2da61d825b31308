"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MergeLabError(Exception):
    exit_code = 1


class InputError(MergeLabError, ValueError):
    """Bad configuration, malformed input file, or violated precondition."""

    exit_code = 2


class IncompatibleError(MergeLabError, ValueError):
    """Parameter sets or catalogs whose shapes do not line up."""

    exit_code = 3


class NumericalError(MergeLabError, ArithmeticError):
    """Non-finite loss or gradient during optimization."""

    exit_code = 4
