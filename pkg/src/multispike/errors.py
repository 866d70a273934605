"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class NumericFaultError(EngineError):
    """A non-finite value appeared where finite numbers are required.

    The message carries the coordinates (layer, step, unit) when the fault
    was detected inside a network pass.
    """


class ConfigError(EngineError):
    """Invalid configuration: bad schema, mismatched dimensions, bad paths."""


class DataFormatError(EngineError):
    """Malformed event file: bad magic, truncated record, out-of-range field."""


class TapeError(EngineError):
    """The forward tape is missing or incomplete for the requested backward pass."""
