"""Desk-scale class-incremental learning laboratory.

Submodules: ``numeric`` (Gram/centering, seeded RNG streams), ``repsim``
(HSIC, CKA, t-SNE), ``nn`` (MLP extractor, heads, losses, SGD), ``data``
(synthetic benchmark), ``cil`` (stage learners), ``analysis`` (retraining
protocol and metrics), ``config`` and ``cli``.
"""

from .errors import (
    ArtifactIOError,
    CilabError,
    ConfigError,
    DegenerateSizeError,
    DimensionError,
    IntegrityError,
    NormalizationError,
    ParameterError,
    ProtocolError,
    UndefinedSimilarityError,
)
from .numeric import RngStream

__version__ = "0.1.0"

__all__ = [
    "ArtifactIOError",
    "CilabError",
    "ConfigError",
    "DegenerateSizeError",
    "DimensionError",
    "IntegrityError",
    "NormalizationError",
    "ParameterError",
    "ProtocolError",
    "UndefinedSimilarityError",
    "RngStream",
]
