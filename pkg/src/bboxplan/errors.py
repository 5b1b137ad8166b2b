"""Exception hierarchy shared by all bboxplan modules."""


class BBoxPlanError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(BBoxPlanError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class ContractError(BBoxPlanError, ValueError):
    """A precondition of an operation does not hold."""


class GeometryError(BBoxPlanError, ValueError):
    """Degenerate or out-of-frame geometric input."""


class ParseError(BBoxPlanError, ValueError):
    """A scenario record could not be decoded."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(BBoxPlanError, ValueError):
    """A decoded record violates a type invariant; ``field`` names the culprit."""

    def __init__(self, field, message, line=None):
        self.field = field
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{field}: {message}")


class TrainingError(BBoxPlanError, RuntimeError):
    """Optimization produced non-finite values."""


class CheckpointError(BBoxPlanError, ValueError):
    """A checkpoint file is malformed or does not match the expected shapes."""
