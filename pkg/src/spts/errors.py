"""Exception types raised across the package."""


class SptsError(Exception):
    """Base class for all package errors."""


class ShapeError(SptsError, ValueError):
    pass


class BudgetError(SptsError, ValueError):
    pass


class NumericError(SptsError, ArithmeticError):
    pass


class OrderingError(SptsError, ValueError):
    pass


class FormatError(SptsError, ValueError):
    pass


class InputError(SptsError, ValueError):
    pass


class ScheduleError(SptsError, ValueError):
    pass
