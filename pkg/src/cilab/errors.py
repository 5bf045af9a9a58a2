"""Exception hierarchy shared by every cilab module.

Each family maps to a distinct CLI exit code (see ``cilab.cli``).
"""


class CilabError(Exception):
    exit_code = 1


class DimensionError(CilabError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 7


class DegenerateSizeError(DimensionError):
    """Too few samples for the requested estimator."""


class UndefinedSimilarityError(CilabError, ArithmeticError):
    """A similarity normaliser is zero or negative (e.g. constant features)."""

    exit_code = 9


class ParameterError(CilabError, ValueError):
    exit_code = 8


class NormalizationError(ParameterError):
    """Zero-norm row under a cosine head."""


class ConfigError(CilabError, ValueError):
    exit_code = 3


class ProtocolError(CilabError, RuntimeError):
    """An incremental-learning protocol contract was broken."""

    exit_code = 4


class IntegrityError(CilabError, RuntimeError):
    """A frozen snapshot or run artifact does not match its recorded digest."""

    exit_code = 5


class ArtifactIOError(CilabError, OSError):
    exit_code = 6
