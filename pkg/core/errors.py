# core/errors.py
"""
Exception hierarchy for the structured Hartree-Fock solver.
Every error carries the context needed to report it without a traceback.
"""

from typing import Any, Dict, List, Optional, Tuple


class HFStructError(Exception):
    """Base class for all solver errors"""

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(HFStructError):
    pass


class InvalidGridError(HFStructError):
    pass


class InfeasibleGridError(HFStructError):
    def __init__(self, axis: int, pair: Tuple[float, float], min_width: float):
        self.axis = axis
        self.pair = pair
        self.min_width = min_width
        super().__init__(
            f"nuclei at {pair[0]:.6g} and {pair[1]:.6g} on axis {axis} are closer than "
            f"the minimum cell width {min_width:.6g}"
        )


class DimensionMismatchError(HFStructError):
    pass


class SingularSpectrumError(HFStructError):
    def __init__(self, eigenvalue: complex, index: Optional[int] = None):
        self.eigenvalue = eigenvalue
        self.index = index
        super().__init__(f"spectral value {eigenvalue!r} at index {index} is singular for the requested function")


class UnachievableAccuracyError(HFStructError):
    def __init__(self, requested: float, floor: float):
        self.requested = requested
        self.floor = floor
        super().__init__(f"requested accuracy {requested:.3e} is below the calibrated floor {floor:.3e}")


class FarFieldPreconditionError(HFStructError):
    def __init__(self, distance: float, alpha: float):
        self.distance = distance
        self.alpha = alpha
        super().__init__(f"|R| = {distance:.6g} is inside the switch radius {alpha:.6g}; use near_field_integral")


class SupportMismatchError(HFStructError):
    def __init__(self, axis: int):
        self.axis = axis
        super().__init__(f"factor supports differ on axis {axis}")


class UnsupportedBasisError(HFStructError):
    pass


class UnknownModeError(HFStructError):
    pass


class NonOrthonormalFrameError(HFStructError):
    def __init__(self, deviation: float):
        self.deviation = deviation
        super().__init__(f"frame Gram deviation {deviation:.3e} exceeds 1e-8")


class StagnationError(HFStructError):
    def __init__(self, iterations: int, log: List[Dict[str, Any]]):
        self.iterations = iterations
        self.log = log
        super().__init__(f"Davidson residual did not decrease over {iterations} iterations")


class ParseError(HFStructError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)


class TableFormatError(HFStructError):
    pass


class CheckpointFormatError(HFStructError):
    pass


class DegenerateBoxWarning(UserWarning):
    """Raised through warnings.warn when a box has zero width on some axis"""
