"""Exception hierarchy shared by every module."""


class LasermonError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(LasermonError, ValueError):
    """Input data or arguments violate a documented precondition."""


class FormatError(ValidationError):
    """On-disk layout is missing pieces or is malformed."""


class CapacityError(ValidationError):
    """Requested computation exceeds a hard size limit."""


class DegenerateTarget(ValidationError):
    """Target has zero variance, so R² is undefined."""


class TrainingDiverged(LasermonError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class StudyFailed(LasermonError):
    """Every trial of a hyperparameter study failed."""
