"""Exception hierarchy for elplab.

Every error contract in the package raises a subclass of :class:`ElpError`.
The subclasses also derive from the closest builtin exception, so callers
that only know about ``ValueError`` and friends keep working.
"""


class ElpError(Exception):
    """Base class of all elplab errors."""


class ShapeError(ElpError, ValueError):
    """Array shapes or lengths do not conform to an operation."""


class DomainError(ElpError, ValueError):
    """An argument lies outside the domain of an operation."""


class NonFiniteError(ElpError, FloatingPointError):
    """A NaN or an infinity reached a place that only holds finite values."""


class ConfigError(ElpError, ValueError):
    """Invalid, unknown, or inconsistent configuration."""


class CorpusFormatError(ElpError, ValueError):
    """Malformed clip file or corpus directory."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where = f"{where}:{line}"
            where = f"{where}: "
        super().__init__(f"{where}{message}")


class CheckpointError(ElpError, ValueError):
    """Missing, corrupt, or incompatible model checkpoint."""


class DivergenceError(ElpError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, checkpoint=None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(message)


class GradientCheckError(ElpError, AssertionError):
    """Analytic gradients disagree with finite differences."""
