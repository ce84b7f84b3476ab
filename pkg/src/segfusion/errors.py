"""Exception hierarchy shared across the package."""


class SegfusionError(Exception):
    """Base class for all package errors."""


class DimensionError(SegfusionError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SegfusionError, ArithmeticError):
    """Non-finite input or a value outside an operation's domain."""


class ContractError(SegfusionError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(SegfusionError, ValueError):
    """Invalid or inconsistent configuration."""


class CorpusError(SegfusionError, ValueError):
    """Base class for corpus loading failures."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class CorpusParseError(CorpusError):
    pass


class CorpusDimensionError(CorpusError):
    pass


class LabelRangeError(CorpusError):
    pass


class TrainingDivergedError(SegfusionError, RuntimeError):
    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}, batch {batch}")


class CorpusValueError(CorpusError):
    pass
