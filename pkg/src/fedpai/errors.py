"""Exception types shared across the simulator."""


class FedPaiError(Exception):
    """Base class for all simulator errors."""


class SpecError(FedPaiError):
    """Invalid model architecture description."""


class LayoutError(FedPaiError):
    """Arrays, masks, or payloads do not match the expected layout or shape."""


class NumericsError(FedPaiError):
    """Non-finite values encountered where finite ones are required."""


class PartitionError(FedPaiError):
    """A data partition could not be constructed."""


class PayloadError(FedPaiError):
    """Malformed wire payload."""


class ConfigError(FedPaiError):
    """Invalid configuration value.

    Formats as ``<field> must be <allowed> (got <value>)`` so callers and
    tests can match on the field name and the legal range.
    """

    def __init__(self, message=None, *, field=None, value=None, allowed=None):
        if message is None:
            message = f"{field} must be {allowed} (got {value!r})"
        super().__init__(message)
        self.field = field
        self.value = value
        self.allowed = allowed
