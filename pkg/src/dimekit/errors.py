"""Exception hierarchy shared by all dimekit modules."""


class DimekitError(Exception):
    """Base class for all errors raised by dimekit."""


class InputError(DimekitError, ValueError):
    """Invalid user-supplied data (bad coordinates, missing labels, ...)."""


class DegenerateGeometryError(InputError):
    """Geometry for which distances or angles are undefined (coincident atoms)."""


class ParseError(InputError):
    """Malformed dataset file. ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ContractViolation(DimekitError):
    """A caller broke an API precondition (shape mismatch, bad index, ...)."""


class TrainingDiverged(DimekitError):
    """Loss became non-finite during optimisation."""
