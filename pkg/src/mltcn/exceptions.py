"""Exception hierarchy for the mltcn package."""


class MltcnError(Exception):
    """Base class for all package errors."""


class ParameterDomain(MltcnError, ValueError):
    """A model parameter lies outside its admissible domain."""


class NumericalBreakdown(MltcnError, ArithmeticError):
    """A factorization failed or a non-finite value appeared.

    ``context`` carries whatever indices help locate the failure
    (iteration, observation, component, variable).
    """

    def __init__(self, message, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class EmptyComponent(MltcnError):
    """A mixture component lost all of its mass."""

    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"component {component} has no weight")


class FitFailed(MltcnError):
    """Every restart of a fit raised; ``errors`` holds one entry per restart."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "; ".join(f"restart {i}: {e!r}" for i, e in enumerate(self.errors))
        super().__init__(f"all {len(self.errors)} restarts failed: {lines}")


class SelectionFailed(MltcnError):
    """Every cell of a model-selection grid failed."""


class UnsupportedDimension(MltcnError, ValueError):
    """Requested latent dimension is too large for the chosen method."""


class ParseError(MltcnError, ValueError):
    """Malformed input file; ``row`` and ``column`` are 1-based when known."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        if row is not None:
            message = f"{message} at row {row}" + (f", column {column}" if column is not None else "")
        super().__init__(message)


class VersionError(MltcnError, ValueError):
    """Serialized document has an unsupported format version."""


class IoError(MltcnError, OSError):
    """A file could not be opened for reading or writing."""
