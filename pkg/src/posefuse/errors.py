"""Exception types shared across modules.

Every error maps onto one of two CLI exit codes: ``ValidationError`` -> 2,
``NumericalError`` -> 3.
"""


class PoseFuseError(Exception):
    pass


class ValidationError(PoseFuseError, ValueError):
    pass


class NumericalError(PoseFuseError, ArithmeticError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class CorruptModelFile(ValidationError):
    pass


class NaNGradient(NumericalError):
    pass


class DivergedTraining(NumericalError):
    pass


class NonPositiveSigma(ValidationError):
    pass


class EmptyEnsemble(ValidationError):
    pass


class DegenerateQuaternion(NumericalError):
    pass


class LineageMismatch(ValidationError):
    pass
