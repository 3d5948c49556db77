"""Exception types shared across the package."""


class T2ICountError(Exception):
    pass


class DimensionError(T2ICountError, ValueError):
    """Tensor shapes or spatial ratios do not satisfy an operation's contract."""


class InputError(T2ICountError, ValueError):
    """Bad values (NaN pixels, empty prompts, unknown split names, ...)."""


class IngestionError(T2ICountError, OSError):
    """A dataset file is missing or references something that does not exist."""


class ConfigError(T2ICountError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "config error"


class NumericError(T2ICountError, RuntimeError):
    """Non-finite activations or losses."""


class CheckpointError(T2ICountError, RuntimeError):
    pass
