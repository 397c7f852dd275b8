"""Exception and warning types shared across the package."""


class ModelConfigError(ValueError):
    """Invalid model structure, constraint, or configuration input."""


class DataValidationError(ValueError):
    """Panel data violating the observation-scheme invariants."""

    def __init__(self, message, subject_id=None, row=None):
        super().__init__(message)
        self.subject_id = subject_id
        self.row = row


class HazardDomainError(ValueError):
    """Hazard evaluated outside its time domain (e.g. Weibull at t <= 0)."""


class NumericalError(RuntimeError):
    """Numerical failure: eigendecomposition residue, singular information,
    zero likelihood contribution, covariance factorisation, ..."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context if context is not None else {}


class ExtrapolationWarning(UserWarning):
    """Spline basis evaluated outside its knot domain; values were clamped."""
