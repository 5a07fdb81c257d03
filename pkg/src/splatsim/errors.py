"""Exception types raised across the engine."""


class SplatSimError(Exception):
    """Base class for all engine errors."""


class PlyFormatError(SplatSimError):
    pass


class PlyDataError(SplatSimError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ParameterError(SplatSimError, ValueError):
    pass


class DegenerateDeformationError(SplatSimError):
    """det(F) <= 0 or a vanishing singular value where one is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class OutOfDomainError(SplatSimError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class NumericalBlowupError(SplatSimError):
    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


class TimestepError(SplatSimError):
    pass


class FillOverflowError(SplatSimError):
    def __init__(self, message, count):
        super().__init__(message)
        self.count = count


class ConfigError(SplatSimError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class StructuralDiffError(SplatSimError):
    pass
