"""Exception hierarchy for diffctl."""

from typing import Any, Optional


class DiffCtlError(Exception):
    """Base class for all diffctl failures."""


class DomainError(DiffCtlError, ValueError):
    """A primitive was evaluated outside its mathematical domain."""

    def __init__(self, primitive: str, value: Any):
        self.primitive = primitive
        self.value = value
        super().__init__(f"{primitive}: argument {value!r} is outside the domain")


class NonFiniteError(DiffCtlError, ArithmeticError):
    """A gradient or intermediate quantity became NaN or infinite."""


class IntegrationBlowupError(DiffCtlError, ArithmeticError):
    """An integrator produced a non-finite state."""

    def __init__(self, time: float, message: str = ""):
        self.time = time
        super().__init__(message or f"integration produced a non-finite state at t={time:g}")


class DivergenceError(DiffCtlError):
    """An iterative solver left the admissible iterate region."""

    def __init__(self, iteration: int, message: str, diagnostics: Optional[Any] = None):
        self.iteration = iteration
        self.diagnostics = diagnostics
        super().__init__(f"iteration {iteration}: {message}")


class StationarityError(DiffCtlError):
    """Implicit differentiation was requested at a point that is not stationary."""

    def __init__(self, residual: float, threshold: float):
        self.residual = residual
        self.threshold = threshold
        super().__init__(
            f"stationarity residual {residual:.3e} exceeds threshold {threshold:.3e}; "
            "solve the inner problem further before using implicit gradients"
        )


class SingularSystemError(DiffCtlError, ArithmeticError):
    """A linear system required for sensitivities is singular or ill-conditioned."""


class TranscriptionError(DiffCtlError, ValueError):
    """A transcription was requested with an unsupported configuration."""


class ConfigError(DiffCtlError, ValueError):
    """An experiment configuration failed to parse or validate."""

    def __init__(self, path: str, key: str, message: str):
        self.path = path
        self.key = key
        super().__init__(f"{path}: {key}: {message}")
