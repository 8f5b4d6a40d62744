"""Exception types shared across the package."""


class HyperRecError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(HyperRecError):
    """An argument violates a documented precondition."""


class ContractViolationError(HyperRecError):
    """Two internally produced values disagree with each other."""


class NumericError(HyperRecError):
    """A computation produced a non-finite value."""


class ParseError(HyperRecError):
    """A text input file is malformed."""


class FormatError(HyperRecError):
    """A binary input file is malformed."""


class ConfigError(HyperRecError):
    """A configuration value is unknown or out of range."""
