"""Dense attention containers, mask semantics, and the exact reference path.

Everything here is the ground truth that the approximate retrieval-based
path is measured against: row-by-row softmax attention, per-row weight
vectors, and exact top-k key selection.

All containers are immutable after construction and every operation is
read-only, so concurrent use needs no locking; callers may fan out
per-row work across threads as they see fit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ValidationError",
    "MaskKind",
    "Mask",
    "AttentionProblem",
    "as_matrix",
    "vanilla_attention",
    "attention_row_weights",
    "brute_force_topk",
]

SUPPORTED_DTYPES = (np.float32, np.float64)


class ValidationError(ValueError):
    """Raised when an input violates a structural invariant."""


def as_matrix(data, dtype=np.float32) -> np.ndarray:
    """Validate and convert external input into a 2-D row-major array.

    Rejects non-finite entries; accepts 32- or 64-bit float targets.
    """
    dtype = np.dtype(dtype)
    if dtype.type not in SUPPORTED_DTYPES:
        raise ValidationError(f"unsupported dtype {dtype}; use float32 or float64")
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValidationError("matrix contains NaN or Inf entries")
    return arr


class MaskKind(enum.Enum):
    NONE = "none"
    CAUSAL = "causal"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class Mask:
    """Visibility grid: query i may attend to key j iff the mask bit is 1.

    Causal means bit(i, j) = 1 iff i >= j and requires a square problem.
    Explicit carries the full boolean grid; rows with no visible key are
    rejected because the softmax is undefined there.
    """

    kind: MaskKind = MaskKind.NONE
    bits: np.ndarray | None = None

    @staticmethod
    def none() -> "Mask":
        return Mask(MaskKind.NONE)

    @staticmethod
    def causal() -> "Mask":
        return Mask(MaskKind.CAUSAL)

    @staticmethod
    def explicit(bits) -> "Mask":
        grid = np.ascontiguousarray(bits, dtype=bool)
        if grid.ndim != 2:
            raise ValidationError("explicit mask must be a 2-D boolean grid")
        return Mask(MaskKind.EXPLICIT, grid)

    def validate(self, n: int, m: int) -> None:
        if self.kind is MaskKind.EXPLICIT:
            if self.bits is None:
                raise ValidationError("explicit mask is missing its bit grid")
            if self.bits.shape != (n, m):
                raise ValidationError(
                    f"explicit mask shape {self.bits.shape} != ({n}, {m})"
                )
            if not self.bits.any(axis=1).all():
                bad = int(np.flatnonzero(~self.bits.any(axis=1))[0])
                raise ValidationError(f"mask row {bad} has no visible key")
        elif self.kind is MaskKind.CAUSAL:
            if n != m:
                raise ValidationError(f"causal mask requires n == m, got {n} != {m}")
        elif self.bits is not None:
            raise ValidationError("mask kind 'none' must not carry bits")

    def row(self, i: int, m: int) -> np.ndarray | None:
        """Boolean visibility of row i, or None when every key is visible."""
        if self.kind is MaskKind.NONE:
            return None
        if self.kind is MaskKind.CAUSAL:
            vis = np.zeros(m, dtype=bool)
            vis[: i + 1] = True
            return vis
        return self.bits[i]


@dataclass(frozen=True)
class AttentionProblem:
    """One attention instance: queries (n x d), keys (m x d), values (m x d_v)."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    mask: Mask = field(default_factory=Mask.none)
    scale: float | None = None

    def __post_init__(self):
        q, k, v = self.queries, self.keys, self.values
        for name, mat in (("queries", q), ("keys", k), ("values", v)):
            if not isinstance(mat, np.ndarray) or mat.ndim != 2:
                raise ValidationError(f"{name} must be a 2-D ndarray (use as_matrix)")
            if mat.dtype.type not in SUPPORTED_DTYPES:
                raise ValidationError(f"{name} has unsupported dtype {mat.dtype}")
        if q.dtype != k.dtype or q.dtype != v.dtype:
            raise ValidationError("queries, keys, values must share one dtype")
        if q.shape[1] != k.shape[1]:
            raise ValidationError(
                f"query dim {q.shape[1]} != key dim {k.shape[1]}"
            )
        if k.shape[0] != v.shape[0]:
            raise ValidationError(
                f"{k.shape[0]} keys but {v.shape[0]} values"
            )
        self.mask.validate(q.shape[0], k.shape[0])
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / np.sqrt(q.shape[1]))
        elif not np.isfinite(self.scale):
            raise ValidationError("scale must be finite")

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    @property
    def m(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.keys.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.queries.dtype


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    # max-logit subtraction keeps exp() in range for large ||q|| ||k||
    shifted = logits - logits.max()
    w = np.exp(shifted)
    w /= w.sum()
    return w


def vanilla_attention(problem: AttentionProblem) -> np.ndarray:
    """Exact softmax attention, materializing one weight row at a time.

    Working memory is O(m); the full n x m weight matrix is never built.
    """
    n, d_v = problem.n, problem.d_v
    keys, values, queries = problem.keys, problem.values, problem.queries
    scale = problem.scale
    kind = problem.mask.kind
    out = np.empty((n, d_v), dtype=problem.dtype)
    for i in range(n):
        q = queries[i]
        if kind is MaskKind.CAUSAL:
            sub_k = keys[: i + 1]
            sub_v = values[: i + 1]
        elif kind is MaskKind.EXPLICIT:
            vis = problem.mask.bits[i]
            sub_k = keys[vis]
            sub_v = values[vis]
        else:
            sub_k = keys
            sub_v = values
        logits = sub_k @ q
        logits *= scale
        out[i] = _stable_softmax(logits) @ sub_v
    return out


def attention_row_weights(problem: AttentionProblem, i: int) -> np.ndarray:
    """Row i of the attention weight matrix; masked entries are exactly 0."""
    if not 0 <= i < problem.n:
        raise ValidationError(f"row index {i} out of range [0, {problem.n})")
    vis = problem.mask.row(i, problem.m)
    logits = problem.keys @ problem.queries[i]
    logits *= problem.scale
    weights = np.zeros(problem.m, dtype=problem.dtype)
    if vis is None:
        weights[:] = _stable_softmax(logits)
    else:
        if not vis.any():
            raise ValidationError(f"row {i} has no visible key")
        weights[vis] = _stable_softmax(logits[vis])
    return weights


def brute_force_topk(problem: AttentionProblem, i: int, k: int) -> list[int]:
    """Exact ids of the min(k, #visible) keys with the largest q_i . k_j.

    Ties go to the smaller key id, so the result is fully deterministic.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not 0 <= i < problem.n:
        raise ValidationError(f"row index {i} out of range [0, {problem.n})")
    vis = problem.mask.row(i, problem.m)
    logits = problem.keys @ problem.queries[i]
    if vis is None:
        ids = np.arange(problem.m)
    else:
        ids = np.flatnonzero(vis)
        logits = logits[ids]
    # primary: logit descending; secondary: id ascending
    order = np.lexsort((ids, -logits.astype(np.float64)))
    return [int(ids[j]) for j in order[:k]]
