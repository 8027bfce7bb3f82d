"""Exception types shared across the package."""


class FedsimError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedsimError):
    """A tensor shape does not match what a model layer expects.

    The message always names the offending layer so that failures deep in a
    round loop remain attributable.
    """


class ConfigError(FedsimError):
    """A configuration file or value is invalid.

    Carries a dotted ``field`` path (e.g. ``"training.batch_size"``) when the
    problem is attributable to a single field.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        self.message = message
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class EngineError(FedsimError):
    """A failure inside the round loop, annotated with round/cluster context."""
