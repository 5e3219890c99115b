"""Exception hierarchy shared by all plateid modules."""


class PlateIdError(Exception):
    """Base class for every error raised by plateid."""


class InvalidArgumentError(PlateIdError, ValueError):
    pass


class FormatError(PlateIdError, ValueError):
    """A mesh, field, force or config file could not be parsed."""


class ConfigurationError(PlateIdError, ValueError):
    pass


class NonPhysicalDeformationError(PlateIdError, ArithmeticError):
    pass


class ElementInversionError(NonPhysicalDeformationError):
    def __init__(self, element, detF):
        self.element = int(element)
        self.detF = float(detF)
        super().__init__(f"element {self.element} inverted (det F = {self.detF:.3e})")


class RootBracketError(PlateIdError, ArithmeticError):
    pass


class InterpolationError(PlateIdError, ValueError):
    def __init__(self, node, distance):
        self.node = int(node)
        self.distance = float(distance)
        super().__init__(
            f"target node {self.node} lies {self.distance:.3e} outside the source mesh"
        )


class SingularSystemError(PlateIdError, ArithmeticError):
    def __init__(self, rank, n_cols, message=None):
        self.rank = int(rank)
        self.n_cols = int(n_cols)
        super().__init__(message or f"least-squares system is rank deficient: rank {rank} < {n_cols} columns")


class NumericalFailureError(PlateIdError, ArithmeticError):
    pass


class NonConvergenceError(NumericalFailureError):
    pass


class SegmentationError(PlateIdError):
    pass


class UndefinedRatioError(PlateIdError, ArithmeticError):
    pass


class UnsupportedSizeError(PlateIdError, ValueError):
    pass
