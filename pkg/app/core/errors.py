class VdwCoherenceError(Exception):
    exit_code = 1


class ConfigError(VdwCoherenceError):
    exit_code = 2


class DataError(ConfigError):
    pass


class InvalidArgumentError(VdwCoherenceError, ValueError):
    exit_code = 2


class DegenerateGeometryError(VdwCoherenceError, ValueError):
    exit_code = 2


class NumericalFailureError(VdwCoherenceError, ArithmeticError):
    exit_code = 3


class ClusterTooLargeError(NumericalFailureError):
    pass


class InsufficientDecayError(VdwCoherenceError):
    exit_code = 4
