"""CPU top-k sparse self-attention via rank-based nearest-neighbor retrieval.

Per query, only the keys likely to carry the highest attention weights are
retrieved from a projection index over lifted key embeddings; the softmax
runs over exactly that set. Includes an exact reference path, a streaming
causal mode with incremental index updates, and benchmark harnesses.
"""

from .core import (
    AttentionProblem,
    Mask,
    MaskKind,
    ValidationError,
    as_matrix,
    attention_row_weights,
    brute_force_topk,
    vanilla_attention,
)
from .dci import DciIndex, QuerySpec, brute_force_query, load_snapshot
from .embed import (
    EmbeddedPoint,
    EmbeddingContext,
    choose_c,
    embed_key,
    embed_keys,
    embed_query,
)
from .sparse import (
    AdaptiveK,
    SparseAttentionConfig,
    SparseResult,
    approximation_error,
    causal_attention,
    resolve_k,
    sparse_attention,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionProblem",
    "Mask",
    "MaskKind",
    "ValidationError",
    "as_matrix",
    "attention_row_weights",
    "brute_force_topk",
    "vanilla_attention",
    "DciIndex",
    "QuerySpec",
    "brute_force_query",
    "load_snapshot",
    "EmbeddedPoint",
    "EmbeddingContext",
    "choose_c",
    "embed_key",
    "embed_keys",
    "embed_query",
    "AdaptiveK",
    "SparseAttentionConfig",
    "SparseResult",
    "approximation_error",
    "causal_attention",
    "resolve_k",
    "sparse_attention",
    "__version__",
]
