"""Exception types raised across the package."""


class DarlError(Exception):
    """Base class for all errors raised by :mod:`darl`."""


class DimensionError(DarlError, ValueError):
    """Array shapes do not compose."""


class NumericError(DarlError, FloatingPointError):
    """A non-finite value appeared during a forward or loss computation.

    Attributes
    ----------
    layer : int or None
        Index of the first layer whose output was non-finite.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class LabelError(DarlError, ValueError):
    """A class or pseudo label is out of range."""


class BatchError(DarlError, ValueError):
    """A training batch is empty."""


class InvalidActionError(DarlError, ValueError):
    """An action refers to a candidate that was already selected."""


class ExhaustedError(DarlError, RuntimeError):
    """No legal action remains in the current state."""


class ParameterError(DarlError, ValueError):
    """Invalid generator or configuration parameter."""


class ConfigError(DarlError, ValueError):
    """Unknown or out-of-range configuration key."""


class IntegrityError(DarlError, OSError):
    """A checkpoint on disk does not match its manifest."""
