class MsvitError(Exception):
    """Base class for every error raised by the package"""


class DimensionError(MsvitError, ValueError):
    def __init__(self, what: str, left, right):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{what}: shapes {self.left} and {self.right} do not agree")


class ArgumentError(MsvitError, ValueError):
    pass


class ConfigError(MsvitError):
    pass


class DatasetError(MsvitError):
    pass


class SplitError(MsvitError):
    pass


class CheckpointError(MsvitError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class InvariantViolation(MsvitError, RuntimeError):
    pass
