"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid build-time configuration (widths, dimensions, config keys)."""


class ShapeError(ValueError):
    """Array shape mismatch between caller and contract."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (missing atoms, layouts)."""


class DomainError(ValueError):
    """A point lies outside the problem domain."""


class UnsupportedOperationError(RuntimeError):
    """Operation not defined for this problem kind."""


class EnumerationGuardError(RuntimeError):
    """An exact enumeration would exceed the combination budget."""


class UndefinedMetricError(ZeroDivisionError):
    """A relative metric has a zero denominator."""


class CheckpointError(IOError):
    """Checkpoint file is truncated, corrupt, or version-incompatible."""


class DivergenceError(RuntimeError):
    """Training aborted on a non-finite loss; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
