"""Exception hierarchy. Each top-level family maps to a CLI exit code."""


class AdinError(Exception):
    exit_code = 1


class ConfigError(AdinError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Tensor or layer shapes do not agree."""


class ContractError(AdinError, RuntimeError):
    """A call violated an API precondition (e.g. backward from a non-scalar)."""


class DataError(AdinError, ValueError):
    exit_code = 3


class LabelError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, msg, record=None, offset=None):
        super().__init__(msg)
        self.record = record
        self.offset = offset


class DivergenceError(AdinError, FloatingPointError):
    """Raised when a training loss goes non-finite.

    ``state`` holds the last bundle whose loss was still finite.
    """

    exit_code = 4

    def __init__(self, msg, state=None, epoch=None):
        super().__init__(msg)
        self.state = state
        self.epoch = epoch
