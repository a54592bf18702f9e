import contextlib


class NNMassError(Exception):
    """
    Base class for every error raised by this library.

    Args:
        message (str): A human readable description.
        context: Any keyword arguments are kept as a machine readable context dictionary, so the CLI can report
            them as `{"code": ..., "message": ..., "context": {...}}`.
    """
    code = "error"

    def __init__(self, message, **context):
        super(NNMassError, self).__init__(message)
        self.message = message
        self.context = context

    def to_dict(self):
        return {"code": self.code, "message": self.message, "context": self.context}


class RangeError(NNMassError, ValueError):
    code = "range"


class DegenerateCellError(NNMassError, ValueError):
    code = "degenerate_cell"


class ShapeError(NNMassError, ValueError):
    code = "shape"


class StaleCacheError(NNMassError, RuntimeError):
    code = "stale_cache"


class NumericError(NNMassError, ArithmeticError):
    code = "numeric"


class DivergenceError(NNMassError, ArithmeticError):
    """Raised when training produces a non-finite loss. `last_finite_epoch` is -1 if no epoch ever finished."""
    code = "divergence"

    def __init__(self, message, last_finite_epoch=-1, **context):
        super(DivergenceError, self).__init__(message, last_finite_epoch=last_finite_epoch, **context)
        self.last_finite_epoch = last_finite_epoch


class UnsupportedConfigurationError(NNMassError, ValueError):
    code = "unsupported"


class FormatError(NNMassError, ValueError):
    code = "format"


class ConsistencyError(NNMassError, ValueError):
    code = "consistency"


class DegenerateVarianceError(NNMassError, ValueError):
    code = "degenerate_variance"


class DomainError(NNMassError, ValueError):
    code = "domain"


class InfeasibleTargetError(NNMassError, ValueError):
    """The requested mass cannot be reached. `mass_range` is the (min, max) that can."""
    code = "infeasible"

    def __init__(self, message, mass_range, **context):
        super(InfeasibleTargetError, self).__init__(message, mass_range=list(mass_range), **context)
        self.mass_range = tuple(mass_range)


@contextlib.contextmanager
def reading(what, **context):
    """
    Report a malformed `what` document as a FormatError.

    Missing keys, unknown fields and values of the wrong type surface from the loaders as KeyError, TypeError,
        AttributeError or ValueError. Errors of this library pass through unchanged, even the ValueError subclasses.
    """
    try:
        yield
    except NNMassError:
        raise
    except KeyError as e:
        raise FormatError(f"The {what} is missing {e.args[0]!r}", document=what, key=str(e.args[0]), **context) from e
    except (TypeError, AttributeError, ValueError) as e:
        raise FormatError(f"Malformed {what}: {e}", document=what, **context) from e
