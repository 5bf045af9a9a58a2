"""Representation similarity: HSIC, CKA (full and mini-batch) and exact t-SNE."""

from .cka import (
    DEFAULT_CKA_BATCH,
    DEFAULT_CKA_PASSES,
    CkaAccumulator,
    LayerTapSet,
    cka_full,
    cka_minibatch_finalize,
    cka_minibatch_update,
    cka_unbiased,
    hsic_biased,
    hsic_unbiased,
    layerwise_cka,
)
from .tsne import TsneResult, tsne_embed, tsne_run

__all__ = [
    "DEFAULT_CKA_BATCH",
    "DEFAULT_CKA_PASSES",
    "CkaAccumulator",
    "LayerTapSet",
    "cka_full",
    "cka_minibatch_finalize",
    "cka_minibatch_update",
    "cka_unbiased",
    "hsic_biased",
    "hsic_unbiased",
    "layerwise_cka",
    "TsneResult",
    "tsne_embed",
    "tsne_run",
]
