"""Exception types raised at API boundaries."""


class MfChargeError(Exception):
    """Base class for all package errors."""


class NonIntegerGrid(MfChargeError, ValueError):
    pass


class NotNormalized(MfChargeError, ValueError):
    pass


class IndexOutOfRange(MfChargeError, IndexError):
    pass


class InvalidRate(MfChargeError, ValueError):
    """Charging-rate samples violate the sign or boundary rules."""


class CflViolation(MfChargeError, ValueError):
    pass


class NoConvergence(MfChargeError, RuntimeError):
    pass


class LinearSolveStagnation(MfChargeError, RuntimeError):
    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class InvalidStepSize(MfChargeError, ValueError):
    pass


class PremiseUnmet(MfChargeError, ValueError):
    pass


class MeshMisaligned(MfChargeError, ValueError):
    pass


class BadSignalLength(MfChargeError, ValueError):
    pass


class ParseError(MfChargeError, ValueError):
    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class LengthMismatch(MfChargeError, ValueError):
    pass
