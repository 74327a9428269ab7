"""Exception hierarchy shared by all pipeline stages."""


class EnfuseError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(EnfuseError):
    """An argument violates a documented precondition."""


class DegenerateInputError(EnfuseError):
    """Numerically degenerate input (zero-norm vector, empty batch, ...)."""


class InvalidDatasetError(EnfuseError):
    """A dataset violates a structural requirement (empty class, too few samples)."""


class InvalidStateError(EnfuseError):
    """Operation called on an object in the wrong lifecycle stage."""


class UnsupportedModelError(EnfuseError):
    """The model lacks a structural feature the operation needs."""


class IntegrityError(EnfuseError):
    """A persisted artifact failed its hash or format validation."""


class ConfigError(EnfuseError):
    """Run configuration is malformed or contains unknown keys."""
