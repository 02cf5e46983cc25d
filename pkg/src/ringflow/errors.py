class RingflowError(Exception):
    pass


class DegenerateInputError(RingflowError, ValueError):
    pass


class InvalidSnapshotError(RingflowError, ValueError):
    pass


class InvalidActionError(RingflowError, ValueError):
    pass


class NoPrecedingVehicleError(RingflowError, ValueError):
    pass


class InvalidGapError(RingflowError, ValueError):
    pass


class ConfigError(RingflowError, ValueError):
    """Bad configuration; ``key`` names the offending setting when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CollectionError(RingflowError, RuntimeError):
    pass


class DivergenceError(RingflowError, FloatingPointError):
    pass


class ModelFormatError(RingflowError, ValueError):
    pass


class RoleMismatchError(ModelFormatError):
    pass
