"""Exception hierarchy shared by every xmoda module."""


class XModaError(Exception):
    """Base class for all package errors."""


# volume-io
class MissingFile(XModaError, FileNotFoundError):
    pass


class CorruptHeader(XModaError, ValueError):
    pass


class NonFiniteData(XModaError, ValueError):
    pass


class InvalidSpacing(XModaError, ValueError):
    pass


class CropTooLarge(XModaError, ValueError):
    pass


class MissingSlice(XModaError, ValueError):
    pass


class DuplicateSlice(XModaError, ValueError):
    pass


class MixedParents(XModaError, ValueError):
    pass


# phantom-gen
class ShapeTooSmall(XModaError, ValueError):
    pass


class IoFailure(XModaError, OSError):
    pass


# losses / attention
class ShapeMismatch(XModaError, ValueError):
    pass


class NonFiniteInput(XModaError, ValueError):
    pass


class KOutOfRange(XModaError, ValueError):
    pass


class TooFewNegatives(XModaError, ValueError):
    pass


# training
class EmptyDataset(XModaError, ValueError):
    pass


class DivergenceDetected(XModaError, RuntimeError):
    """Raised when a recorded loss becomes non-finite.

    ``checkpoint`` holds the state at the end of the last finite epoch.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class IncompatibleCheckpoint(XModaError, ValueError):
    pass


class EmptyEnsemble(XModaError, ValueError):
    pass


class EmptyLabeledSet(XModaError, ValueError):
    pass


# metrics
class EmptyMask(XModaError, ValueError):
    pass


class LengthMismatch(XModaError, ValueError):
    pass


class ZeroVariance(XModaError, ValueError):
    pass


class TooFewSamples(XModaError, ValueError):
    pass


# orchestration
class ConfigInvalid(XModaError, ValueError):
    pass


class HashMismatch(XModaError, RuntimeError):
    pass
