"""Cross-resolution re-identification with resolution-adaptive representations."""

from .errors import DataError, DomainError, NumericError, ShapeError
from .resolution import (
    EmbeddingLayout,
    ResolutionLevel,
    VaryingLengthEmbedding,
    quantize_resolution,
    zero_pad,
)
from .model import MaskBank, ModelConfig, ResolutionAdaptiveNet, apply_resolution_mask, embed
from .retrieval import cross_res_distance, evaluate_mlr, rank, resolve_unseen_resolution

__version__ = "0.1.0"
