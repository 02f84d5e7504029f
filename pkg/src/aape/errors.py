"""Exception hierarchy; `exit_code` is what the CLI returns for each family."""


class AapeError(Exception):
    exit_code = 1


class ConfigError(AapeError):
    exit_code = 2


class UsageError(ConfigError):
    exit_code = 2


class StateError(AapeError):
    exit_code = 3


class LifecycleError(StateError):
    pass


class DataError(AapeError, ValueError):
    exit_code = 4


class FormatError(DataError):
    pass


class EvaluationError(AapeError, ArithmeticError):
    exit_code = 4
