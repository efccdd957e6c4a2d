"""
Exception hierarchy shared by the knockoff modules.

Each class carries the process exit code the command line maps it to.
"""

from typing import Optional


class KnockoffError(Exception):
    """Base class for every error raised by this project"""
    exit_code = 1


class ConfigError(KnockoffError, ValueError):
    """Invalid configuration, parameters or schema"""
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DimensionError(ParameterError):
    pass


class InputError(KnockoffError, OSError):
    """Missing, unreadable or malformed input file"""
    exit_code = 3


class NumericalError(KnockoffError, ArithmeticError):
    exit_code = 4


class NotPSDError(NumericalError):
    """Matrix has an eigenvalue below the allowed negative slack"""

    def __init__(self, eigenvalue: float, clip_tol: float):
        self.eigenvalue = eigenvalue
        self.clip_tol = clip_tol
        super().__init__(f"matrix is not PSD: eigenvalue {eigenvalue:.3e} < -{clip_tol:.3e}")


class ConstructionError(NumericalError):
    pass


class EstimationError(NumericalError):
    pass


class DegenerateGridError(NumericalError):
    pass


class SolverError(KnockoffError):
    """Coordinate descent did not converge"""
    exit_code = 5

    def __init__(self, message: str, lambda_index: Optional[int] = None):
        self.lambda_index = lambda_index
        super().__init__(message)
