"""Exception hierarchy. CLI exit codes key off the base classes."""


class NavSpeakError(Exception):
    pass


class ConfigError(NavSpeakError, ValueError):
    """Bad configuration value or unknown key (exit code 2)."""


class DataError(NavSpeakError, ValueError):
    """Malformed or inconsistent input data (exit code 3)."""


class NumericError(NavSpeakError, FloatingPointError):
    """Non-finite loss or gradients during training (exit code 4)."""

    def __init__(self, message, step=None, task=None, grad_norms=None):
        super().__init__(message)
        self.step = step
        self.task = task
        self.grad_norms = grad_norms or {}


class SizingError(DataError):
    pass


class UnreachableLengthError(DataError):
    pass


class ViewpointLookupError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ShapeError(DataError):
    pass


class CapacityError(DataError):
    """Trajectory longer than the history table, or tokens beyond the context."""


class LayerIndexError(DataError, IndexError):
    pass


class EmptyMaskError(DataError):
    pass


class DegenerateFeatureError(DataError):
    pass


class NoPreviousViewpointError(DataError):
    pass


class IntegrityError(DataError):
    """Checkpoint file is truncated or its digest does not match."""


class MigrationError(DataError):
    def __init__(self, found, expected):
        super().__init__(
            f"checkpoint schema {found!r} cannot be loaded by schema {expected!r}; "
            "no migration path is defined"
        )
        self.found = found
        self.expected = expected
