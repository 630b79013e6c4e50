"""Key/query embeddings that turn inner-product ranking into distance ranking.

Keys live inside a ball of radius c; each key gains one coordinate that
lifts it onto the unit sphere in d+1 dims, while queries are normalized
and padded with a zero. Euclidean closeness of the lifted points is then
monotone in the original inner product:

    ||query_emb - key_emb||^2 = 2 - 2 (q . k) / (c ||q||)

so the nearest embedded keys are exactly the highest-attention keys.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import ValidationError

__all__ = [
    "NormBoundError",
    "DegenerateQueryError",
    "PointKind",
    "EmbeddingContext",
    "EmbeddedPoint",
    "choose_c",
    "embed_key",
    "embed_keys",
    "embed_query",
    "StreamingNormBound",
]

NORM_SLACK = 1e-9  # relative tolerance on the key-norm precondition
C_HEADROOM = 1e-6  # relative headroom added above the observed max norm
C_FLOOR = 1e-12


class NormBoundError(ValidationError):
    """A key's norm exceeds the context bound c beyond the allowed slack."""


class DegenerateQueryError(ValueError):
    """Query norm is below the zero threshold; callers fall back."""


class PointKind(enum.Enum):
    KEY = "key"
    QUERY = "query"


@dataclass(frozen=True)
class EmbeddingContext:
    """Bound c on key norms plus the source dimension, fixed per key set."""

    c: float
    d: int
    epsilon_norm: float = 1e-12

    def __post_init__(self):
        if not self.c > 0:
            raise ValidationError(f"norm bound c must be positive, got {self.c}")
        if self.d < 1:
            raise ValidationError(f"source dimension must be >= 1, got {self.d}")


@dataclass(frozen=True)
class EmbeddedPoint:
    """Unit-norm (d+1)-dim image of a key or query."""

    coords: np.ndarray
    source_id: int
    kind: PointKind

    def validate(self) -> None:
        norm = float(np.linalg.norm(self.coords))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"embedded point norm {norm} != 1")
        if self.kind is PointKind.QUERY and self.coords[-1] != 0.0:
            raise ValidationError("query embedding must end in an exact 0")
        if self.kind is PointKind.KEY and self.coords[-1] < 0.0:
            raise ValidationError("key embedding has negative last coordinate")


def choose_c(keys: np.ndarray) -> float:
    """Norm bound for a key set: max row norm with a little headroom.

    The headroom keeps the embedding of the max-norm key real under float
    round-off; all-zero key sets get a tiny positive floor.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValidationError("choose_c needs a nonempty 2-D key matrix")
    max_norm = float(np.sqrt((keys * keys).sum(axis=1).max()))
    return max(max_norm * (1.0 + C_HEADROOM), C_FLOOR)


def embed_key(key: np.ndarray, ctx: EmbeddingContext, source_id: int = 0) -> EmbeddedPoint:
    """Lift one key onto the unit sphere in d+1 dims."""
    key = np.asarray(key, dtype=np.float64)
    if key.shape != (ctx.d,):
        raise ValidationError(f"key shape {key.shape} != ({ctx.d},)")
    norm_sq = float(key @ key)
    bound = ctx.c * (1.0 + NORM_SLACK)
    if norm_sq > bound * bound:
        raise NormBoundError(
            f"key norm {math.sqrt(norm_sq):.6g} exceeds bound c={ctx.c:.6g}"
        )
    coords = np.empty(ctx.d + 1, dtype=np.float64)
    coords[: ctx.d] = key / ctx.c
    # clamp absorbs negative round-off when ||k|| is at the bound
    coords[ctx.d] = math.sqrt(max(0.0, 1.0 - norm_sq / (ctx.c * ctx.c)))
    return EmbeddedPoint(coords, source_id, PointKind.KEY)


def embed_keys(keys: np.ndarray, ctx: EmbeddingContext) -> np.ndarray:
    """Vectorized key lift; row j of the result is embed_key(keys[j]).coords."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != ctx.d:
        raise ValidationError(f"key matrix shape {keys.shape} incompatible with d={ctx.d}")
    norms_sq = np.einsum("ij,ij->i", keys, keys)
    bound = ctx.c * (1.0 + NORM_SLACK)
    if norms_sq.size and norms_sq.max() > bound * bound:
        bad = int(norms_sq.argmax())
        raise NormBoundError(
            f"key {bad} norm {math.sqrt(norms_sq[bad]):.6g} exceeds bound c={ctx.c:.6g}"
        )
    out = np.empty((keys.shape[0], ctx.d + 1), dtype=np.float64)
    out[:, : ctx.d] = keys / ctx.c
    np.sqrt(np.maximum(0.0, 1.0 - norms_sq / (ctx.c * ctx.c)), out=out[:, ctx.d])
    return out


def embed_query(query: np.ndarray, ctx: EmbeddingContext, source_id: int = 0) -> EmbeddedPoint:
    """Normalize a query and pad it with an exact zero coordinate."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (ctx.d,):
        raise ValidationError(f"query shape {query.shape} != ({ctx.d},)")
    norm = float(np.linalg.norm(query))
    if norm <= ctx.epsilon_norm:
        raise DegenerateQueryError(f"query norm {norm:.3g} below threshold")
    coords = np.empty(ctx.d + 1, dtype=np.float64)
    coords[: ctx.d] = query / norm
    coords[ctx.d] = 0.0
    return EmbeddedPoint(coords, source_id, PointKind.QUERY)


class StreamingNormBound:
    """Norm-bound policy for keys that arrive online.

    The bound is fixed from the first batch; a later key above it forces a
    rebuild (re-embed everything under the new bound). Doubling on every
    rebuild keeps the number of rebuilds logarithmic in the largest norm.
    """

    def __init__(self, initial_keys: np.ndarray):
        self.c = choose_c(initial_keys)
        self.rebuilds = 0

    def observe(self, key: np.ndarray) -> bool:
        """Account for one incoming key; True means a rebuild is required."""
        norm = float(np.linalg.norm(np.asarray(key, dtype=np.float64)))
        if norm * (1.0 + NORM_SLACK) <= self.c:
            return False
        self.c = max(2.0 * self.c, norm * (1.0 + C_HEADROOM))
        self.rebuilds += 1
        return True

    def context(self, d: int) -> EmbeddingContext:
        return EmbeddingContext(c=self.c, d=d)
