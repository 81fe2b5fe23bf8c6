"""Exception types raised by the solver stack."""


class DDConvectError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DDConvectError, ValueError):
    """Invalid input data, parameters or mesh setup."""


class GeometryError(DDConvectError, ValueError):
    """Degenerate or inverted triangles."""


class EvaluationError(DDConvectError, ValueError):
    """Basis evaluated outside its element."""


class UnsupportedDegreeError(ConfigurationError):
    """Requested polynomial degree has no rule or element."""


class SolverError(DDConvectError, RuntimeError):
    """A linear or nonlinear solve failed.

    ``history`` carries whatever diagnostics the failing loop collected
    (residuals, increments) and ``last`` the last iterate, when available.
    """

    def __init__(self, message, history=None, last=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
        self.last = last
