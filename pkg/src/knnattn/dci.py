"""Prioritized projection index: construction, querying, incremental updates.

Each simple index pairs one random unit direction with an ordered map from
projection value to point id. A composite index bundles p simple indices;
a point becomes a candidate once the query walk has visited it in all p of
them. Querying walks outward from the query's projection in every simple
index, always expanding the globally closest unvisited projection.

This module is the readable reference realization; the batch/streaming
attention paths run an array-packed engine that is equivalence-tested
against it (see _engine.py).
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np
from sortedcontainers import SortedList

from .core import ValidationError
from .embed import EmbeddedPoint

__all__ = [
    "QuerySpec",
    "SimpleIndex",
    "DciIndex",
    "DciSnapshot",
    "brute_force_query",
    "sample_directions",
    "load_snapshot",
]

SNAPSHOT_MAGIC = b"DCI1"


@dataclass(frozen=True)
class QuerySpec:
    """Retrieval budgets: final k, k0 retrieved and k1 visited per composite."""

    k: int
    k0: int
    k1: int

    def __post_init__(self):
        if not 1 <= self.k <= self.k0 <= self.k1:
            raise ValidationError(
                f"need 1 <= k <= k0 <= k1, got k={self.k} k0={self.k0} k1={self.k1}"
            )

    @staticmethod
    def exhaustive(m: int, p: int) -> "QuerySpec":
        """Budgets that force every point into the candidate set."""
        m = max(m, 1)
        return QuerySpec(k=m, k0=m, k1=m * p + 1)


def sample_directions(p: int, L: int, dim: int, seed: int) -> np.ndarray:
    """p*L unit directions, Gaussian-normalized, row f = j*L + l for simple (j, l)."""
    if p < 1 or L < 1:
        raise ValidationError(f"need p >= 1 and L >= 1, got p={p} L={L}")
    if dim < 1:
        raise ValidationError(f"direction dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((p * L, dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / norms


class SimpleIndex:
    """One projection direction plus an ordered (projection, seq, id) map.

    Ties on projection value stay in insertion order via the seq component,
    which keeps every walk deterministic.
    """

    __slots__ = ("direction", "entries")

    def __init__(self, direction: np.ndarray):
        self.direction = direction
        self.entries: SortedList = SortedList()

    def insert(self, proj: float, seq: int, point_id: int) -> None:
        self.entries.add((proj, seq, point_id))

    def delete(self, proj: float, seq: int, point_id: int) -> None:
        self.entries.remove((proj, seq, point_id))

    def __len__(self) -> int:
        return len(self.entries)


class _Cursor:
    """Walks one simple index outward from the query projection.

    Yields entries in nondecreasing |projection - qproj|; on an exact
    distance tie the left (smaller projection) side goes first.
    """

    __slots__ = ("entries", "qproj", "lo", "hi")

    def __init__(self, simple: SimpleIndex, qproj: float):
        self.entries = simple.entries
        self.qproj = qproj
        pos = self.entries.bisect_left((qproj,))
        self.lo = pos - 1
        self.hi = pos

    def _sides(self):
        dl = self.qproj - self.entries[self.lo][0] if self.lo >= 0 else np.inf
        dr = (
            self.entries[self.hi][0] - self.qproj
            if self.hi < len(self.entries)
            else np.inf
        )
        return dl, dr

    def peek(self):
        """(dist, point_id) of the next entry, or None when exhausted."""
        dl, dr = self._sides()
        if dl == np.inf and dr == np.inf:
            return None
        if dl <= dr:
            return dl, self.entries[self.lo][2]
        return dr, self.entries[self.hi][2]

    def pop(self):
        dl, dr = self._sides()
        if dl <= dr:
            entry = self.entries[self.lo]
            self.lo -= 1
            return dl, entry[2]
        entry = self.entries[self.hi]
        self.hi += 1
        return dr, entry[2]


class DciIndex:
    """p x L grid of simple indices over a shared point store.

    Queries are read-only and safe to run concurrently; insert/delete
    need exclusive access (single writer, multiple readers).
    """

    def __init__(self, num_simple: int, num_composite: int, dim: int, seed: int):
        if num_simple < 1 or num_composite < 1:
            raise ValidationError(
                f"need p >= 1 and L >= 1, got p={num_simple} L={num_composite}"
            )
        if dim < 1:
            raise ValidationError(f"point dimension must be >= 1, got {dim}")
        self.num_simple = num_simple
        self.num_composite = num_composite
        self.dim = dim
        self.rng_seed = seed
        self.directions = sample_directions(num_simple, num_composite, dim, seed)
        self.simples = [
            [
                SimpleIndex(self.directions[j * num_composite + l])
                for l in range(num_composite)
            ]
            for j in range(num_simple)
        ]
        self._points: dict[int, tuple[np.ndarray, int]] = {}
        self._seq = 0

    # -- construction and updates -----------------------------------------

    @classmethod
    def construct(cls, points, p: int, L: int, seed: int) -> "DciIndex":
        """Build an index over points: an (m, dim) array or EmbeddedPoints."""
        if isinstance(points, np.ndarray):
            if points.ndim != 2:
                raise ValidationError("point matrix must be 2-D")
            dim = points.shape[1]
            items = [(i, points[i]) for i in range(points.shape[0])]
        else:
            items = [(pt.source_id, pt.coords) for pt in points]
            dim = items[0][1].shape[0] if items else 1
        index = cls(p, L, dim, seed)
        for point_id, coords in items:
            index.insert(coords, point_id)
        return index

    def insert(self, point, point_id: int | None = None) -> None:
        """Add one point to every simple index; O(p L log m)."""
        if isinstance(point, EmbeddedPoint):
            coords, point_id = point.coords, point.source_id
        else:
            coords = point
            if point_id is None:
                raise ValidationError("raw-coordinate insert needs a point_id")
        coords = np.ascontiguousarray(coords, dtype=np.float64)
        if coords.shape != (self.dim,):
            raise ValidationError(f"point shape {coords.shape} != ({self.dim},)")
        if point_id in self._points:
            raise ValidationError(f"point id {point_id} already present")
        seq = self._seq
        self._seq += 1
        projs = self.directions @ coords
        for j in range(self.num_simple):
            for l in range(self.num_composite):
                self.simples[j][l].insert(
                    float(projs[j * self.num_composite + l]), seq, point_id
                )
        self._points[point_id] = (coords, seq)

    def delete(self, point_id: int) -> None:
        """Remove a point from every simple index; O(p L log m)."""
        if point_id not in self._points:
            raise ValidationError(f"point id {point_id} not present")
        coords, seq = self._points.pop(point_id)
        projs = self.directions @ coords
        for j in range(self.num_simple):
            for l in range(self.num_composite):
                self.simples[j][l].delete(
                    float(projs[j * self.num_composite + l]), seq, point_id
                )

    def __len__(self) -> int:
        return len(self._points)

    def check_invariants(self) -> None:
        ids = set(self._points)
        for row in self.simples:
            for simple in row:
                got = {entry[2] for entry in simple.entries}
                if got != ids or len(simple) != len(ids):
                    raise ValidationError("simple index out of sync with point store")

    # -- querying -----------------------------------------------------------

    def query(self, q, spec: QuerySpec) -> list[tuple[int, float]]:
        """Top-k candidates as (id, inner product with q), best first.

        Per composite, a priority queue over the p cursors expands the
        globally closest unvisited projection; a point whose visit count
        reaches p joins that composite's candidate set. Visiting stops
        after k1 - 1 expansions or once k0 candidates are found. The union
        over composites is ranked by exact inner product, ties to the
        smaller id. An empty index yields an empty result.
        """
        if isinstance(q, EmbeddedPoint):
            qcoords = q.coords
        else:
            qcoords = np.ascontiguousarray(q, dtype=np.float64)
        if qcoords.shape != (self.dim,):
            raise ValidationError(f"query shape {qcoords.shape} != ({self.dim},)")
        if not self._points:
            return []

        qprojs = self.directions @ qcoords
        union: set[int] = set()
        for l in range(self.num_composite):
            counts: dict[int, int] = {}
            found = 0
            cursors = []
            heap = []
            for j in range(self.num_simple):
                cur = _Cursor(self.simples[j][l], float(qprojs[j * self.num_composite + l]))
                cursors.append(cur)
                head = cur.peek()
                if head is not None:
                    heap.append((head[0], j))
            heapq.heapify(heap)
            for _ in range(spec.k1 - 1):
                if found >= spec.k0 or not heap:
                    break
                _, j = heapq.heappop(heap)
                _, point_id = cursors[j].pop()
                hits = counts.get(point_id, 0) + 1
                counts[point_id] = hits
                if hits == self.num_simple:
                    union.add(point_id)
                    found += 1
                head = cursors[j].peek()
                if head is not None:
                    heapq.heappush(heap, (head[0], j))

        scored = [
            (point_id, float(self._points[point_id][0] @ qcoords)) for point_id in union
        ]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored[: spec.k]

    # -- serialization --------------------------------------------------------

    def save_snapshot(self, path) -> None:
        self.to_snapshot().save(path)

    def to_snapshot(self) -> "DciSnapshot":
        projections, ids = [], []
        for j in range(self.num_simple):
            for l in range(self.num_composite):
                entries = list(self.simples[j][l].entries)
                projections.append(np.array([e[0] for e in entries], dtype="<f4"))
                ids.append(np.array([e[2] for e in entries], dtype="<u8"))
        return DciSnapshot(
            self.num_simple,
            self.num_composite,
            self.dim,
            len(self),
            self.directions.astype("<f4"),
            projections,
            ids,
        )


def brute_force_query(points, q, k: int) -> list[int]:
    """Exact top-k point ids by inner product; ties go to the smaller id.

    The oracle for recall computations; k larger than the point count
    returns every id, still ranked.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        return []
    scores = pts @ np.asarray(q, dtype=np.float64)
    order = np.lexsort((np.arange(pts.shape[0]), -scores))
    return [int(i) for i in order[:k]]


# -- snapshot wire format ------------------------------------------------------
#
# "DCI1" | p, L, dim, m as u64 LE | directions row-major f32 (p*L x dim)
# | per simple index (row f = j*L + l): m pairs of (f32 projection, u64 id)
# in ascending projection order.

_ENTRY_DTYPE = np.dtype([("proj", "<f4"), ("id", "<u8")])


@dataclass
class DciSnapshot:
    """Parsed snapshot: directions and per-simple-index sorted entry lists."""

    num_simple: int
    num_composite: int
    dim: int
    count: int
    directions: np.ndarray  # (p*L, dim) float32
    projections: list[np.ndarray]  # per simple index, ascending float32
    ids: list[np.ndarray]  # aligned uint64

    def save(self, path) -> None:
        header = SNAPSHOT_MAGIC + struct.pack(
            "<4Q", self.num_simple, self.num_composite, self.dim, self.count
        )
        chunks = [header, self.directions.astype("<f4").tobytes()]
        for proj, ids in zip(self.projections, self.ids):
            rec = np.empty(len(proj), dtype=_ENTRY_DTYPE)
            rec["proj"] = proj
            rec["id"] = ids
            chunks.append(rec.tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))


def load_snapshot(path) -> DciSnapshot:
    """Parse a snapshot file, validating magic, header, and payload sizes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SNAPSHOT_MAGIC:
        raise ValidationError(f"bad snapshot magic {blob[:4]!r}")
    if len(blob) < 4 + 32:
        raise ValidationError("snapshot header truncated")
    p, L, dim, count = struct.unpack_from("<4Q", blob, 4)
    if p < 1 or L < 1 or dim < 1:
        raise ValidationError(f"snapshot header invalid: p={p} L={L} dim={dim}")
    offset = 4 + 32
    dir_bytes = p * L * dim * 4
    if len(blob) < offset + dir_bytes:
        raise ValidationError("snapshot directions truncated")
    directions = np.frombuffer(blob, dtype="<f4", count=p * L * dim, offset=offset)
    directions = directions.reshape(p * L, dim).copy()
    offset += dir_bytes
    projections, ids = [], []
    entry_bytes = count * _ENTRY_DTYPE.itemsize
    for s in range(p * L):
        if len(blob) < offset + entry_bytes:
            raise ValidationError(f"snapshot entries for simple index {s} truncated")
        rec = np.frombuffer(blob, dtype=_ENTRY_DTYPE, count=count, offset=offset)
        projections.append(rec["proj"].copy())
        ids.append(rec["id"].copy())
        offset += entry_bytes
    if offset != len(blob):
        raise ValidationError(f"{len(blob) - offset} trailing bytes after entries")
    return DciSnapshot(int(p), int(L), int(dim), int(count), directions, projections, ids)
