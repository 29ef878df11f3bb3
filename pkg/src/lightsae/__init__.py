"""Shared-auxiliary channel embeddings (SAE, LightSAE) for multivariate forecasting."""

from .backbone import BackboneSpec, ForecastModel
from .embedding import VARIANTS, EmbeddingParams, EmbeddingSpec
from .numcore import Matrix, Tape, backward

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "EmbeddingParams",
    "EmbeddingSpec",
    "ForecastModel",
    "Matrix",
    "Tape",
    "VARIANTS",
    "backward",
]
