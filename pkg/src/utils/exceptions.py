"""Error hierarchy. Each error carries the CLI exit code it maps to."""

from typing import Any, Dict

from src.config.settings import EXIT_CODES


class ChiralityError(Exception):
    """Base class for every error raised by chirality-kit."""

    exit_code = EXIT_CODES["unexpected"]

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), "exit_code": self.exit_code}


class ValidationError(ChiralityError, ValueError):
    """Invalid layout, shape, config, kind or file."""

    exit_code = EXIT_CODES["validation"]


class PropertyViolation(ChiralityError):
    """A checked property (equivariance, identity, gradient) does not hold."""

    exit_code = EXIT_CODES["property_violation"]


class AuditError(PropertyViolation):
    """Measured cost of a layer exceeds its analytic bound."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"layer '{layer}': {message}")
        self.layer = layer

    def to_dict(self) -> Dict[str, Any]:
        record = super().to_dict()
        record["layer"] = self.layer
        return record


class DivergenceError(ChiralityError, ArithmeticError):
    """Non-finite loss or values encountered."""

    exit_code = EXIT_CODES["divergence"]
