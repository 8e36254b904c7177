"""Exception types shared across the package."""


class Hybrid0DError(Exception):
    """Base class for all package errors."""


class ValidationError(Hybrid0DError, ValueError):
    """Input data (network, centerline, file) fails a structural check."""


class InvalidGeometryError(ValidationError):
    pass


class CenterlineError(ValidationError):
    pass


class NetworkValidationError(ValidationError):
    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class SolverDivergenceError(Hybrid0DError):
    """Newton iteration failed to reach tolerance within the iteration budget."""

    def __init__(self, step, time, residual_norm, message=None):
        self.step = step
        self.time = time
        self.residual_norm = residual_norm
        super().__init__(
            message
            or f"Newton did not converge at step {step} (t={time:.6g}), "
            f"residual norm {residual_norm:.3e}"
        )


class SingularJacobianError(SolverDivergenceError):
    def __init__(self, step, time):
        super().__init__(step, time, float("nan"), f"singular Jacobian at step {step} (t={time:.6g})")


class InsufficientDataError(ValidationError):
    pass


class CalibrationError(Hybrid0DError):
    pass


class TrainingDivergenceError(Hybrid0DError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")


class GridMismatchError(ValidationError):
    pass
