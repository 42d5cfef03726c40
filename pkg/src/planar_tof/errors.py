"""Exception types raised across the package."""


class PlanarTofError(Exception):
    """Base class of every error this package raises on purpose."""


class InvalidInputError(PlanarTofError, ValueError):
    """Input data or parameters violate an operation's preconditions."""


class DegenerateInputError(InvalidInputError):
    """Input is well formed but numerically degenerate (e.g. zero-norm histogram)."""


class DatasetParseError(InvalidInputError):
    """A dataset file line does not conform to the JSON Lines schema."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NoPeakError(InvalidInputError):
    """An ambient-corrected histogram has no positive signal to locate."""


class ModelStateError(PlanarTofError, RuntimeError):
    """A model is used in a state it does not support (e.g. uncalibrated)."""


class ModelLoadError(InvalidInputError):
    """A model file is truncated, malformed or of an unsupported version."""


class EmptySceneError(InvalidInputError):
    """No simulated ray hits any scene surface within sensor range."""
