"""Exception hierarchy. ``exit_code`` is what the CLI returns when one escapes."""


class CIUDAError(Exception):
    exit_code = 1


class ConfigurationError(CIUDAError, ValueError):
    exit_code = 1


class SizingError(ConfigurationError):
    pass


class ContractViolation(CIUDAError, RuntimeError):
    exit_code = 1


class DegenerateInputError(CIUDAError, ValueError):
    exit_code = 2


class IngestionError(CIUDAError, IOError):
    exit_code = 2


class DataError(CIUDAError, ValueError):
    exit_code = 2


class LoadError(CIUDAError, IOError):
    exit_code = 2


class ReportError(CIUDAError, ValueError):
    exit_code = 2


class NumericalError(CIUDAError, FloatingPointError):
    exit_code = 3
