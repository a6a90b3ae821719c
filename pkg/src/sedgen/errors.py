"""Exception taxonomy shared across the package."""


class SedgenError(Exception):
    """Base class for all package errors."""


class ShapeError(SedgenError):
    """Operand dimensions are incompatible."""


class ConfigError(SedgenError):
    """A configuration value is out of its legal range."""


class ContractError(SedgenError):
    """An API precondition was violated by the caller."""


class InputError(SedgenError):
    """Runtime input data is malformed (audio, manifest, ...)."""


class ParseError(SedgenError):
    """Text or token input cannot be mapped through the vocabulary."""


class TruncationError(SedgenError):
    """An event list does not fit the maximum sequence length.

    Carries the events that would have been dropped in ``dropped_events``.
    """

    def __init__(self, msg: str, dropped_events=None):
        super().__init__(msg)
        self.dropped_events = list(dropped_events or [])


class TrainingError(SedgenError):
    """Training cannot proceed (non-finite gradients, empty batch, ...)."""
