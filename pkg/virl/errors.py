"""Exception hierarchy shared by the library and the command line.

Library code raises; only ``virl.cli`` turns these into exit codes.
"""


class VirlError(Exception):
    exit_status = 2


class UsageError(VirlError):
    exit_status = 1


class ConfigError(UsageError):
    pass


class ShapeError(UsageError, ValueError):
    pass


class DataError(VirlError):
    exit_status = 2


class GeometryError(DataError):
    pass


class DegenerateFaceError(GeometryError):
    pass


class SamplingBudgetError(GeometryError):
    pass


class NumericalError(VirlError):
    exit_status = 3


class NonFiniteLossError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
