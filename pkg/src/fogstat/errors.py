"""Error taxonomy shared by all fogstat modules.

Each class maps to a CLI exit code: ConfigError -> 2, DataError -> 3,
NumericError -> 4. ShapeError is a ConfigError raised when tensor shapes
disagree with a layer or file contract.
"""


class FogstatError(Exception):
    exit_code = 1


class ConfigError(FogstatError):
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor/kernel/file shape does not match the declared contract."""


class DataError(FogstatError):
    exit_code = 3


class NumericError(FogstatError):
    exit_code = 4
