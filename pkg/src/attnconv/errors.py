"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents do not line up for the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's precondition (bad scalar, bad range)."""


class ConfigurationError(ValueError):
    """A configuration object is internally inconsistent or unsupported."""


class FormatError(ValueError):
    """A serialized file is malformed; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the log up to the last finite epoch."""

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log
