"""Exception hierarchy shared across the package."""


class SupernasError(Exception):
    pass


class InvalidGenotype(SupernasError, ValueError):
    pass


class NotInSearchSpace(SupernasError, ValueError):
    pass


class SpaceMismatch(SupernasError, ValueError):
    pass


class InvalidObjective(SupernasError, ValueError):
    pass


class InsufficientPopulation(SupernasError, ValueError):
    pass


class ConfigTooLarge(SupernasError, ValueError):
    pass


class ShapeError(SupernasError, ValueError):
    pass


class MissingShape(SupernasError, ValueError):
    pass


class InvalidWeights(SupernasError, ValueError):
    pass


class InvalidConfig(SupernasError, ValueError):
    pass


class InvalidInput(SupernasError, ValueError):
    pass


class DivergenceError(SupernasError, FloatingPointError):
    """Raised when a training step produces a non-finite loss.

    ``snapshot`` carries diagnostics (iteration, config, loss components).
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class IsolationViolation(SupernasError, RuntimeError):
    pass


class MeasurementError(SupernasError, RuntimeError):
    pass


class IncompleteEvaluation(SupernasError, RuntimeError):
    pass


class UnsupportedCheckpoint(SupernasError, ValueError):
    pass


class ChecksumError(SupernasError, ValueError):
    pass
