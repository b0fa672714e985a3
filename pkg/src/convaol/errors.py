"""Exception hierarchy.

Input and usage problems derive from :class:`InputError` (a ``ValueError``);
numerical breakdowns derive from :class:`NumericalError` (an
``ArithmeticError``). The CLI maps the two families to exit codes 2 and 1.
"""


class ConvAOLError(Exception):
    pass


class InputError(ConvAOLError, ValueError):
    pass


class NumericalError(ConvAOLError, ArithmeticError):
    pass


class DimensionError(InputError):
    pass


class InvalidPaddingError(InputError):
    pass


class PaddingRequiredError(InputError):
    pass


class UndefinedRatioError(InputError):
    pass


class UnsupportedBoundaryError(InputError):
    pass


class UnsupportedShapeError(InputError):
    pass


class UnsupportedCombinationError(InputError):
    pass


class InvalidParameterError(InputError):
    pass


class InvalidThresholdError(InvalidParameterError):
    pass


class InvalidWeightsError(InvalidParameterError):
    pass


class FormatError(InputError):
    pass


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, message, min_eig=None):
        super().__init__(message)
        self.min_eig = min_eig


class DivergenceError(NumericalError):
    pass


class MonotonicityError(NumericalError):
    def __init__(self, message, iteration=None, increase=None):
        super().__init__(message)
        self.iteration = iteration
        self.increase = increase


class SolverFailureError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
