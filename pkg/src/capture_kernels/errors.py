"""Exception hierarchy.

Every error raised by the package derives from ``CaptureKernelsError`` so the
CLI can map whole families onto exit codes.
"""


class CaptureKernelsError(Exception):
    """Base class for all package errors."""


class ConfigError(CaptureKernelsError):
    """Invalid configuration or experiment schema violation."""


class GeneratorError(CaptureKernelsError):
    """A task generator could not produce a valid instance."""


class NumericalError(CaptureKernelsError):
    """A numerical routine failed (factorization, non-finite values, ...)."""


# numerical linear algebra / sampling

class NotSymmetric(NumericalError):
    pass


class RepairExceeded(NumericalError):
    pass


class EigenOvershoot(NumericalError):
    pass


class TooLarge(NumericalError):
    pass


class NotFinite(NumericalError):
    pass


class NotPsd2x2(NumericalError):
    pass


class NegativeVariance(NumericalError):
    pass


class NotProbabilityVector(NumericalError):
    pass


# shapes and state

class ShapeMismatch(CaptureKernelsError, ValueError):
    pass


class MissingNtk(CaptureKernelsError):
    pass


class StageViolation(CaptureKernelsError):
    pass


# tasks

class TooShort(GeneratorError, ValueError):
    pass


class NotPermutation(GeneratorError, ValueError):
    pass


class DegenerateGrammar(GeneratorError):
    pass


class UnsatisfiableLength(GeneratorError):
    pass


class RadiusOverflow(GeneratorError):
    pass


class CapacityExceeded(GeneratorError):
    pass


# harness

class BudgetExhausted(CaptureKernelsError):
    pass


class TooFewPoints(CaptureKernelsError, ValueError):
    pass


class TooFewReps(CaptureKernelsError, ValueError):
    pass
