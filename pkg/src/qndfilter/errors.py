"""Exception types shared across the package."""


class ModelStructureError(ValueError):
    """Shapes or dimensions are inconsistent (distinct from physics-assumption violations)."""


class ConfigError(ValueError):
    """Invalid configuration file or incompatible run options."""


class IntegrationError(RuntimeError):
    """Integrator produced a non-finite state; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DegenerateIntensityError(RuntimeError):
    """A jump arrived while the corresponding mixture intensity was numerically zero."""


class InfeasibleDesignError(RuntimeError):
    """No admissible grid parameters exist; carries the binding constraint."""

    def __init__(self, message: str, binding: str):
        super().__init__(message)
        self.binding = binding


class NonIdentifiableParameterError(ValueError):
    """Requested parameter cannot be estimated under QND records; carries a zero-rate certificate."""

    def __init__(self, message: str, certificate: object = None):
        super().__init__(message)
        self.certificate = certificate
