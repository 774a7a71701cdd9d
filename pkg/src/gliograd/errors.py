"""Exception hierarchy; the CLI maps each family to an exit code."""


class GliogradError(Exception):
    exit_code = 1


class DataError(GliogradError, ValueError):
    """Malformed or inconsistent input files/volumes."""

    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericalError(GliogradError, ArithmeticError):
    """Non-finite values during training or inference."""

    exit_code = 3
