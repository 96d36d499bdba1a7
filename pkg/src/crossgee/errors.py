"""Exception hierarchy.

Every error raised by the package derives from :class:`CrossGEEError`, and
each subclass records the module it originates from so the CLI can print a
module-qualified diagnostic.
"""

from __future__ import annotations


class CrossGEEError(Exception):
    """Base class for all package errors."""

    module = "crossgee"

    def qualified(self) -> str:
        return f"{self.module}.{type(self).__name__}: {self}"


# expfam
class DomainError(CrossGEEError, ValueError):
    module = "expfam"


# correlation
class ParamError(CrossGEEError, ValueError):
    module = "correlation"


class PsdError(CrossGEEError, ValueError):
    module = "correlation"


class SingularError(CrossGEEError, ArithmeticError):
    module = "correlation"


# design
class ConfigError(CrossGEEError, ValueError):
    module = "design"


class RankError(CrossGEEError, ValueError):
    module = "design"

    def __init__(self, message: str, aliased: list[str] | None = None):
        super().__init__(message)
        self.aliased = list(aliased or [])


class BalanceError(CrossGEEError, ValueError):
    module = "design"


# engine
class NonConvergence(CrossGEEError, RuntimeError):
    """Raised when the outer GEE loop exhausts its iteration budget.

    The partially fitted model is attached as ``fit`` and the per-iteration
    trace of ``max |delta beta|`` as ``trace``.
    """

    module = "engine"

    def __init__(self, message: str, fit=None, trace=None):
        super().__init__(message)
        self.fit = fit
        self.trace = list(trace or [])


class DegenerateVariance(CrossGEEError, ArithmeticError):
    module = "engine"


class DegreesOfFreedomError(CrossGEEError, ValueError):
    module = "engine"


class InsufficientData(CrossGEEError, ValueError):
    module = "engine"


# selection
class AllFailed(CrossGEEError, RuntimeError):
    module = "selection"


# simulation
class RejectionError(CrossGEEError, RuntimeError):
    module = "simulation"


# cli / ingestion
class SchemaError(CrossGEEError, ValueError):
    module = "cli"


class DuplicateError(CrossGEEError, ValueError):
    module = "design"


class ParseError(CrossGEEError, ValueError):
    module = "cli"


class RunConfigError(ConfigError):
    module = "cli"
