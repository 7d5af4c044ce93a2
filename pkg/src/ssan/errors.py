"""Exception types raised across the toolkit."""


class SSANError(Exception):
    """Base class for every error raised by :mod:`ssan`."""


class ShapeMismatch(SSANError, ValueError):
    pass


class InvalidRate(SSANError, ValueError):
    pass


class NotScalarLoss(SSANError, ValueError):
    pass


class DetachedTensor(SSANError, ValueError):
    pass


class TapeConsumed(SSANError, RuntimeError):
    """Raised when backward is run a second time on the same loss."""


class NonFiniteValue(SSANError, FloatingPointError):
    pass


class EmptyMaskRow(SSANError, ValueError):
    pass


class HeadDivisibility(SSANError, ValueError):
    pass


class SequenceTooLong(SSANError, ValueError):
    pass


class LabelOutOfRange(SSANError, ValueError):
    pass


class StateShapeMismatch(SSANError, ValueError):
    pass


class NonFiniteLoss(SSANError, FloatingPointError):
    pass


class EmptyCorpus(SSANError, ValueError):
    pass


class _LineError(SSANError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ParseError(_LineError):
    pass


class UnknownLabel(_LineError):
    pass


class EmptySentence(_LineError):
    pass


class MalformedLine(_LineError):
    pass


class DimMismatch(SSANError, ValueError):
    pass
