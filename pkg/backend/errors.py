"""
Exception hierarchy shared by every backend module
"""

from typing import Optional


class AydivError(Exception):
    """Base error; `module` names the pipeline stage that raised it"""

    module = "aydiv"

    def __init__(self, message: str, *, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module


class DimensionError(AydivError):
    module = "numerics"


class ConfigurationError(AydivError):
    module = "config"


class NumericError(AydivError):
    """Non-finite value found while checking gradients"""

    module = "numerics"

    def __init__(self, message: str, *, parameter: Optional[str] = None, module: Optional[str] = None):
        super().__init__(message, module=module)
        self.parameter = parameter


class InputError(AydivError):
    pass


class GenerationError(AydivError):
    module = "scene"


class ParseError(AydivError):
    module = "io"

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None):
        where = path or "<input>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


class UndefinedMetricError(AydivError):
    module = "eval"
