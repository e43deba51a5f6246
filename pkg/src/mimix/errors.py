"""Exception hierarchy shared across the package."""


class MimixError(Exception):
    """Base class for all package errors."""


class ValidationError(MimixError):
    """Invalid inputs: bad files, bad configuration, violated invariants."""


class ParseError(ValidationError):
    """Malformed input file; carries file/line context in the message."""


class ConfigError(ValidationError):
    """Bad or unknown configuration keys/values."""


class EngineError(MimixError):
    """Runtime failure inside chain execution (non-finite state, bad checkpoint)."""
