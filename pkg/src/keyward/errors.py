"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class DegenerateInputError(ValueError):
    """Input for which the operation is undefined (e.g. normalizing a zero vector)."""


class ContractError(RuntimeError):
    """An operation was called out of order or with stale state."""


class ParameterError(ValueError):
    """A scalar argument is outside its admissible range."""


class KeyAccessError(PermissionError):
    """A participant tried to use a class key it does not own."""


class FrameworkSetupError(RuntimeError):
    """Participants or server are configured inconsistently."""


class FormatError(ValueError):
    """Malformed on-disk data."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""
