"""Exception hierarchy shared by every module."""


class HyperFedError(Exception):
    pass


class ShapeError(HyperFedError, ValueError):
    pass


class CapacityError(HyperFedError, ValueError):
    pass


class ParameterError(HyperFedError, ValueError):
    pass


class SingularityError(HyperFedError, ArithmeticError):
    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class FormatError(HyperFedError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(HyperFedError, ValueError):
    pass


class InputError(HyperFedError, ValueError):
    pass


class ProtocolError(HyperFedError, ValueError):
    pass


class ConfigError(HyperFedError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class DivergenceError(HyperFedError, ArithmeticError):
    pass


class CheckpointError(HyperFedError, ValueError):
    pass
