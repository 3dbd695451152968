"""Exception types raised across the package."""


class MountoptError(Exception):
    """Base class for all package errors."""


class ParseError(MountoptError, ValueError):
    """A robot/config file could not be parsed; carries file, line and field."""

    def __init__(self, message, *, source=None, line=None, field=None):
        self.source = source
        self.line = line
        self.field = field
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ValidationError(MountoptError, ValueError):
    """A structurally valid description violates a semantic invariant."""


class MountHookMissing(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class OutOfBounds(MountoptError, ValueError):
    pass


class UnknownFrame(MountoptError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DimensionMismatch(MountoptError, ValueError):
    pass


class EmptyLayout(MountoptError, ValueError):
    pass


class UnknownTask(MountoptError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class BadParams(MountoptError, ValueError):
    pass


class NoPath(MountoptError):
    """A* exhausted the free space without reaching the goal."""


class BudgetTooSmall(MountoptError, ValueError):
    pass


class ConfigInvalid(MountoptError, ValueError):
    pass


class DegenerateInput(MountoptError, ValueError):
    pass


class EvaluationFailed(MountoptError):
    """Wraps an evaluator fault together with the design that triggered it."""

    def __init__(self, omega, cause):
        self.omega = omega
        self.cause = cause
        super().__init__(f"evaluator failed for design {omega!r}: {cause!r}")


class ResumeMismatch(MountoptError):
    """A replayed history diverges from the schedule being re-run."""
