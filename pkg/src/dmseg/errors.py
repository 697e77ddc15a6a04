"""Exception types shared across the package."""


class DmsegError(Exception):
    """Base error; ``code`` feeds the CLI's machine-readable error line."""

    code = "ERROR"


class ParameterError(DmsegError):
    """A caller-supplied parameter is out of range or inconsistent."""

    code = "PARAM"


class InputError(DmsegError):
    """Input data violates a precondition (empty ROI, NaN feature, ...)."""

    code = "INPUT"


class DegenerateGraphError(DmsegError):
    """A graph node lost all its edges, so no Markov chain exists."""

    code = "DEGENERATE"


class NumericalError(DmsegError):
    """An iterative numerical routine failed to converge."""

    code = "NUMERIC"


class ScanTooCoarseError(DmsegError):
    """The sigma grid is too coarse to resolve a linear region."""

    code = "SCAN"


class NoElbowError(DmsegError):
    """The eigenvalue spectrum is too flat to pick a cluster count."""

    code = "NOELBOW"


class StageFailure(DmsegError):
    """A pipeline stage could not produce usable clusters."""

    code = "STAGE"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(DmsegError):
    """A file does not conform to its on-disk format."""

    code = "FORMAT"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DmsegError):
    """The JSON config violates the published schema."""

    code = "CONFIG"

    def __init__(self, message, paths=()):
        self.paths = list(paths)
        if self.paths:
            message = f"{message}: {', '.join(self.paths)}"
        super().__init__(message)
