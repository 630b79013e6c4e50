"""Top-k retrieval attention: batch mode, streaming causal mode, adaptive k.

Per query, only the keys retrieved by the projection index get a logit;
the softmax renormalizes over that set and only those value rows are
combined. Masked keys never enter the index, so masking costs nothing at
query time. The causal mode inserts key i and then answers query i, so
row i can only ever see keys 0..i.

Batch queries are independent after the index is built (the kernel fans
them out across the thread budget); the causal loop is inherently
sequential per head, but separate heads can run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

from . import _engine
from .core import AttentionProblem, MaskKind, ValidationError
from .dci import QuerySpec
from .embed import EmbeddingContext, choose_c

__all__ = [
    "AdaptiveK",
    "SparseAttentionConfig",
    "SparseResult",
    "resolve_k",
    "sparse_attention",
    "causal_attention",
    "approximation_error",
]

DEFAULT_EPSILON_NORM = EmbeddingContext(1.0, 1).epsilon_norm


@dataclass(frozen=True)
class AdaptiveK:
    """Sequence-length-driven k: floor(n * alpha) clamped to [floor, cap]."""

    alpha: float
    floor: int = 30
    cap: int = 50

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 1 <= self.floor <= self.cap:
            raise ValidationError(
                f"need 1 <= floor <= cap, got floor={self.floor} cap={self.cap}"
            )


def resolve_k(adaptive: AdaptiveK, n: int) -> int:
    """k for a sequence of n tokens under the adaptive policy."""
    if n < 1:
        raise ValidationError(f"token count must be >= 1, got {n}")
    return max(min(math.floor(n * adaptive.alpha), adaptive.cap), adaptive.floor)


@dataclass(frozen=True)
class SparseAttentionConfig:
    """Retrieval budgets plus index shape for one attention head."""

    spec: QuerySpec
    p: int = 2
    L: int = 2
    seed: int = 0
    adaptive: AdaptiveK | None = None
    fallback_uniform_topk: int | None = None
    norm_bound: float | None = None  # pin c instead of deriving it from the keys

    def __post_init__(self):
        if self.p < 1 or self.L < 1:
            raise ValidationError(f"need p >= 1 and L >= 1, got p={self.p} L={self.L}")
        if self.fallback_uniform_topk is not None and self.fallback_uniform_topk < 1:
            raise ValidationError("fallback_uniform_topk must be >= 1")
        if self.norm_bound is not None and not self.norm_bound > 0:
            raise ValidationError("norm_bound must be positive")

    @staticmethod
    def exhaustive(m: int, p: int = 2, L: int = 1, seed: int = 0) -> "SparseAttentionConfig":
        """Budgets that retrieve every key, for oracle-equivalence runs."""
        return SparseAttentionConfig(spec=QuerySpec.exhaustive(m, p), p=p, L=L, seed=seed)

    def budgets(self, n_tokens: int) -> tuple[int, int, int]:
        """(k, k0, k1) after the adaptive policy; k0/k1 grow if k outruns them."""
        k = self.spec.k if self.adaptive is None else resolve_k(self.adaptive, n_tokens)
        k0 = max(self.spec.k0, k)
        k1 = max(self.spec.k1, k0)
        return k, k0, k1


@dataclass
class SparseResult:
    """Output rows plus, per query, the retrieved ids and their weights."""

    output: np.ndarray
    selected_ids: np.ndarray  # (n, width), -1 padded
    weight_rows: np.ndarray  # (n, width), aligned with selected_ids
    counts: np.ndarray  # retrieved count per query
    visited: np.ndarray  # index nodes expanded per query
    workspace_elems: int  # allocation proxy: elements of working memory

    @cached_property
    def selected(self) -> list[list[int]]:
        return [
            [int(j) for j in self.selected_ids[i, : self.counts[i]]]
            for i in range(self.selected_ids.shape[0])
        ]

    @cached_property
    def weights(self) -> list[np.ndarray]:
        return [
            self.weight_rows[i, : self.counts[i]].copy()
            for i in range(self.weight_rows.shape[0])
        ]


def _static_kept_ids(problem: AttentionProblem) -> np.ndarray:
    """Key ids visible to every query; rejects masks that vary per row."""
    mask = problem.mask
    if mask.kind is MaskKind.NONE:
        return np.arange(problem.m, dtype=np.int64)
    if mask.kind is MaskKind.CAUSAL:
        raise ValidationError("causal problems go through causal_attention")
    bits = mask.bits
    if not (bits == bits[0]).all():
        raise ValidationError(
            "batch mode needs a static exclusion mask (identical rows)"
        )
    return np.flatnonzero(bits[0]).astype(np.int64)


def _workspace_elems(proj, ids_pack, n, width, d_v, idcap, L, k0):
    threads = numba.get_num_threads()
    per_query_scratch = threads * (2 * idcap + L * k0)
    return int(
        proj.size + ids_pack.size + n * (2 * width + d_v) + per_query_scratch
    )


def sparse_attention(problem: AttentionProblem, config: SparseAttentionConfig) -> SparseResult:
    """Batch retrieval attention for unmasked or statically masked problems.

    Builds the projection index over the visible keys, retrieves per-query
    candidates, re-ranks them by exact inner product, and softmaxes over
    exactly the retrieved set. Never materializes an n x m weight matrix.
    """
    kept = _static_kept_ids(problem)
    if kept.size == 0:
        raise ValidationError("no visible keys to attend to")
    k, k0, k1 = config.budgets(problem.m)
    fallback_k = config.fallback_uniform_topk or k
    width = max(k, fallback_k)

    keys64 = np.ascontiguousarray(problem.keys, dtype=np.float64)
    queries64 = np.ascontiguousarray(problem.queries, dtype=np.float64)
    values64 = np.ascontiguousarray(problem.values, dtype=np.float64)
    kept_keys = np.ascontiguousarray(keys64[kept])

    c = config.norm_bound if config.norm_bound is not None else choose_c(kept_keys)
    if np.sqrt((kept_keys * kept_keys).sum(axis=1).max()) > c * (1.0 + 1e-9):
        raise ValidationError("norm_bound is below the largest key norm")
    dim = problem.d + 1
    U = _engine.engine_directions(config.p, config.L, dim, config.seed)
    proj, ids_pack = _engine.project_and_sort_keys(kept_keys, kept, c, U)

    msize = kept.size
    k1_eff = max(k1, msize * config.p + 1) if msize <= k else k1
    qproj, qok = _engine.project_query_rows(queries64, U, DEFAULT_EPSILON_NORM)
    sel_ids, sel_scores, cnts, visited = _engine.run_batch_query(
        proj, ids_pack, msize, config.p, config.L, qproj, qok,
        keys64, queries64, k, k0, k1_eff, problem.m, width,
    )
    out64, weights = _engine.run_batch_combine(
        sel_scores, cnts, sel_ids, values64, problem.scale
    )

    for i in np.flatnonzero(qok == 0):
        cnt = min(fallback_k, msize)
        chosen = kept[:cnt]
        sel_ids[i, :cnt] = chosen
        weights[i, :cnt] = 1.0 / cnt
        cnts[i] = cnt
        out64[i] = values64[chosen].mean(axis=0)

    return SparseResult(
        output=out64.astype(problem.dtype),
        selected_ids=sel_ids,
        weight_rows=weights,
        counts=cnts,
        visited=visited,
        workspace_elems=_workspace_elems(
            proj, ids_pack, problem.n, width, problem.d_v, problem.m, config.L, k0
        ),
    )


def causal_attention(problem: AttentionProblem, config: SparseAttentionConfig) -> SparseResult:
    """Streaming decode order: insert key i into the index, then answer row i.

    Equivalent to batch retrieval attention run per row against the key
    prefix 0..i with the same seed; rows with i < k see every prefix key
    and are therefore exact.
    """
    if problem.mask.kind is not MaskKind.CAUSAL:
        raise ValidationError("causal_attention requires a causal mask")
    k, k0, k1 = config.budgets(problem.m)
    fallback_k = config.fallback_uniform_topk or k
    width = max(k, fallback_k)

    keys64 = np.ascontiguousarray(problem.keys, dtype=np.float64)
    queries64 = np.ascontiguousarray(problem.queries, dtype=np.float64)
    values64 = np.ascontiguousarray(problem.values, dtype=np.float64)

    c = config.norm_bound if config.norm_bound is not None else choose_c(keys64)
    if np.sqrt((keys64 * keys64).sum(axis=1).max()) > c * (1.0 + 1e-9):
        raise ValidationError("norm_bound is below the largest key norm")
    U = _engine.engine_directions(config.p, config.L, problem.d + 1, config.seed)
    out64, sel_ids, weights, cnts, visited = _engine.run_causal_attention(
        keys64, queries64, values64, U, c, problem.scale,
        config.p, config.L, k, k0, k1, DEFAULT_EPSILON_NORM, fallback_k, width,
    )
    proxy_proj = U.shape[0] * problem.n  # projection + id arrays grow with n
    return SparseResult(
        output=out64.astype(problem.dtype),
        selected_ids=sel_ids,
        weight_rows=weights,
        counts=cnts,
        visited=visited,
        workspace_elems=int(
            2 * proxy_proj + problem.n * (2 * width + problem.d_v) + 2 * problem.n + config.L * k0
        ),
    )


def approximation_error(oracle: np.ndarray, approx: np.ndarray):
    """Per-row Euclidean distance between outputs, plus its mean."""
    if oracle.shape != approx.shape:
        raise ValidationError(
            f"shape mismatch: oracle {oracle.shape} vs approx {approx.shape}"
        )
    diff = oracle.astype(np.float64) - approx.astype(np.float64)
    per_row = np.sqrt((diff * diff).sum(axis=1))
    return per_row, float(per_row.mean()) if per_row.size else 0.0
