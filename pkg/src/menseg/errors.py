"""Exception hierarchy.

Each error belongs to one of three families so the CLI can map failures to
exit codes: configuration problems, data problems and numeric failures.
"""


class MensegError(Exception):
    """Base class for all package errors."""


class ConfigError(MensegError, ValueError):
    pass


class DataError(MensegError, ValueError):
    pass


class NumericError(MensegError, ArithmeticError):
    pass


# volume_io
class ShapeMismatch(DataError):
    pass


class BadLabel(DataError):
    pass


class UnreadableFile(DataError):
    pass


class TargetTooLarge(DataError):
    pass


class MissingMeta(DataError):
    pass


class CroppedMaskNotRestored(DataError):
    pass


# preprocess
class DegenerateChannel(DataError):
    pass


class NonFinite(NumericError):
    pass


# nets
class IndivisibleShape(DataError):
    pass


class NonFiniteActivation(NumericError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


# losses
class NotNormalized(NumericError):
    pass


# train
class NonFiniteLoss(NumericError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class EmptyDataset(DataError):
    pass


class SpecHashMismatch(DataError):
    pass


class CorruptFile(DataError):
    pass


# ensemble / metrics
class GridMismatch(DataError):
    pass


class WrongMemberCount(DataError):
    pass


class EmptySurface(DataError):
    pass


# phantom
class PlacementFailure(DataError):
    pass
