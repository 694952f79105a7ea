"""Exception types raised across the package."""


class MnrError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(MnrError, ValueError):
    pass


class DimensionMismatch(MnrError, ValueError):
    pass


class DomainError(MnrError, ValueError):
    pass


class InvalidSpec(MnrError, ValueError):
    pass


class ConstantColumn(MnrError, ValueError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"column {index} is constant and cannot be standardized")


class NoConvergence(MnrError, RuntimeError):
    pass


class SingularDesign(MnrError, ValueError):
    pass


class SubsetTooLarge(MnrError, ValueError):
    pass


class Separation(MnrError, RuntimeError):
    """Fitted probabilities pinned at 0 or 1 in a logistic fit."""


class DegenerateProjection(MnrError, ValueError):
    pass
