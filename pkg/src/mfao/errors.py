"""Exception types shared across the package."""


class MfaoError(Exception):
    """Base class for package errors."""


class DomainError(MfaoError, ValueError):
    """A point lies outside the domain or a geometric precondition fails."""


class ContractError(MfaoError, ValueError):
    """An operation was called with data violating its contract."""


class ValidationError(MfaoError, ValueError):
    """A coefficient pair violates one of the admissibility conditions.

    Attributes
    ----------
    condition : str
        Name of the violated condition (``regularity``, ``absorption``,
        ``isotropicity``).
    worst_point : tuple or None
        Location of the worst offending sample, when known.
    """

    def __init__(self, message, condition, worst_point=None):
        super().__init__(message)
        self.condition = condition
        self.worst_point = worst_point


class NonContractionError(MfaoError, RuntimeError):
    """Neumann term ratios stopped decreasing; series cannot converge.

    Carries the term-norm history for diagnostics.
    """

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class UnresolvedSourceError(MfaoError, ValueError):
    """A delta-approximation cap contains no quadrature node."""


class AliasingError(MfaoError, ValueError):
    """Oscillatory source wavelength is under-sampled by a boundary grid."""


class IncompleteDataError(MfaoError, ValueError):
    """A measurement set is missing records required by an assembly step."""


class LogDomainError(MfaoError, ValueError):
    """A quantity that must be positive for a logarithm was not."""


class DynamicRangeError(MfaoError, ValueError):
    """Attenuation legs exceed the configured dynamic-range cap."""
