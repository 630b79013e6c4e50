"""Array-packed kernels for the retrieval hot paths.

The reference index in dci.py is object-based and easy to audit; these
kernels run the same walk over flat sorted arrays so that batch queries,
the streaming causal loop, and the k-NN benchmark are fast on CPU. Tests
pin them to the reference implementation query-for-query.

Layout notes:
  - simple-index rows are composite-major: row s = l * p + j,
    while direction sampling order is canonical (f = j * L + l);
    wrappers permute accordingly.
  - all index math is float64; ids are int64 and equal the caller's
    original ids (masked-out keys are simply never inserted).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

import numba

numba.config.THREADING_LAYER = "omp"

from .dci import sample_directions

__all__ = [
    "engine_directions",
    "set_thread_budget",
    "PackedDci",
    "project_and_sort_keys",
    "project_query_rows",
    "run_batch_query",
    "run_causal_attention",
]


def set_thread_budget(threads: int) -> int:
    """Clamp the requested kernel thread budget to what numba can use."""
    limit = numba.config.NUMBA_NUM_THREADS
    effective = max(1, min(int(threads), limit))
    numba.set_num_threads(effective)
    return effective


def engine_directions(p: int, L: int, dim: int, seed: int) -> np.ndarray:
    """Directions permuted from canonical (j*L + l) to engine (l*p + j) order."""
    canonical = sample_directions(p, L, dim, seed)
    perm = np.array([j * L + l for l in range(L) for j in range(p)], dtype=np.int64)
    return np.ascontiguousarray(canonical[perm])


@njit(cache=True)
def _bisect_left(arr, size, v):
    lo, hi = 0, size
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _bisect_right(arr, size, v):
    lo, hi = 0, size
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _embed_key(key, c, ebuf):
    d = key.shape[0]
    nsq = 0.0
    for t in range(d):
        v = key[t]
        nsq += v * v
        ebuf[t] = v / c
    rem = 1.0 - nsq / (c * c)
    ebuf[d] = math.sqrt(rem) if rem > 0.0 else 0.0


@njit(cache=True)
def _project(U, x, out):
    S, dim = U.shape
    for s in range(S):
        acc = 0.0
        for t in range(dim):
            acc += U[s, t] * x[t]
        out[s] = acc


@njit(cache=True)
def _walk_candidates(proj, ids, msize, p, L, qproj, k0, k1, counts, mark, cand):
    """Union of per-composite candidate sets; returns (n_candidates, visits).

    Per composite: p two-sided cursors start at the query projection; each
    round expands the cursor whose head projection is closest (ties: left
    side first, then smaller cursor index). A point visited by all p
    cursors becomes a candidate. Rounds stop at k1 - 1 expansions, k0
    candidates, or cursor exhaustion.
    """
    ncand = 0
    visited = 0
    for l in range(L):
        counts[:] = 0
        lo = np.empty(p, np.int64)
        hi = np.empty(p, np.int64)
        for j in range(p):
            s = l * p + j
            pos = _bisect_left(proj[s], msize, qproj[s])
            lo[j] = pos - 1
            hi[j] = pos
        found = 0
        for _ in range(k1 - 1):
            if found >= k0:
                break
            best_j = -1
            best_dist = np.inf
            for j in range(p):
                s = l * p + j
                dl = qproj[s] - proj[s, lo[j]] if lo[j] >= 0 else np.inf
                dr = proj[s, hi[j]] - qproj[s] if hi[j] < msize else np.inf
                dj = dl if dl <= dr else dr
                if dj < best_dist:
                    best_dist = dj
                    best_j = j
            if best_j == -1:
                break
            s = l * p + best_j
            dl = qproj[s] - proj[s, lo[best_j]] if lo[best_j] >= 0 else np.inf
            dr = proj[s, hi[best_j]] - qproj[s] if hi[best_j] < msize else np.inf
            if dl <= dr:
                h = ids[s, lo[best_j]]
                lo[best_j] -= 1
            else:
                h = ids[s, hi[best_j]]
                hi[best_j] += 1
            visited += 1
            cnt = counts[h] + 1
            counts[h] = cnt
            if cnt == p:
                found += 1
                if mark[h] == 0:
                    mark[h] = 1
                    cand[ncand] = h
                    ncand += 1
    return ncand, visited


@njit(cache=True)
def _select_topk(cand, ncand, points, qvec, k, out_ids, out_scores):
    """Rank candidates by inner product with qvec; ties to the smaller id."""
    ds = qvec.shape[0]
    scores = np.empty(ncand, np.float64)
    for c in range(ncand):
        pid = cand[c]
        acc = 0.0
        for t in range(ds):
            acc += points[pid, t] * qvec[t]
        scores[c] = acc
    nsel = k if k < ncand else ncand
    taken = np.zeros(ncand, np.uint8)
    for r in range(nsel):
        best = -1
        bscore = -np.inf
        bid = np.int64(0)
        for c in range(ncand):
            if taken[c] == 1:
                continue
            sc = scores[c]
            pid = cand[c]
            if best == -1 or sc > bscore or (sc == bscore and pid < bid):
                best = c
                bscore = sc
                bid = pid
        taken[best] = 1
        out_ids[r] = cand[best]
        out_scores[r] = bscore
    return nsel


@njit(cache=True)
def _softmax_combine(scores, cnt, sel_ids, V, scale, out_row, w_out):
    """Scaled softmax over the retrieved logits, then weighted value sum."""
    mx = -np.inf
    for j in range(cnt):
        v = scores[j] * scale
        w_out[j] = v
        if v > mx:
            mx = v
    ssum = 0.0
    for j in range(cnt):
        e = math.exp(w_out[j] - mx)
        w_out[j] = e
        ssum += e
    dv = out_row.shape[0]
    for t in range(dv):
        out_row[t] = 0.0
    for j in range(cnt):
        w = w_out[j] / ssum
        w_out[j] = w
        pid = sel_ids[j]
        for t in range(dv):
            out_row[t] += w * V[pid, t]


@njit(cache=True, parallel=True)
def _project_keys_kernel(K, c, U, out):
    m, d = K.shape
    for i in prange(m):
        ebuf = np.empty(d + 1, np.float64)
        _embed_key(K[i], c, ebuf)
        _project(U, ebuf, out[i])


@njit(cache=True, parallel=True)
def _project_queries_kernel(Q, U, eps, qproj, qok):
    nq, d = Q.shape
    for i in prange(nq):
        qn = 0.0
        for t in range(d):
            qn += Q[i, t] * Q[i, t]
        qn = math.sqrt(qn)
        if qn <= eps:
            qok[i] = 0
            for s in range(U.shape[0]):
                qproj[i, s] = 0.0
        else:
            qok[i] = 1
            qbuf = np.empty(d + 1, np.float64)
            for t in range(d):
                qbuf[t] = Q[i, t] / qn
            qbuf[d] = 0.0
            _project(U, qbuf, qproj[i])


@njit(cache=True, parallel=True)
def _batch_query_kernel(
    proj, ids, msize, p, L, qprojs, qok, points, qvecs, k, k0, k1, idcap,
    out_ids, out_scores, out_cnt, out_visited,
):
    nq = qprojs.shape[0]
    for qi in prange(nq):
        if qok[qi] == 0:
            out_cnt[qi] = 0
            out_visited[qi] = 0
            continue
        counts = np.empty(idcap, np.int32)
        mark = np.zeros(idcap, np.uint8)
        cand = np.empty(L * k0, np.int64)
        ncand, visited = _walk_candidates(
            proj, ids, msize, p, L, qprojs[qi], k0, k1, counts, mark, cand
        )
        out_visited[qi] = visited
        out_cnt[qi] = _select_topk(
            cand, ncand, points, qvecs[qi], k, out_ids[qi], out_scores[qi]
        )


@njit(cache=True, parallel=True)
def _batch_combine_kernel(scores, cnts, sel_ids, V, scale, out, weights):
    nq = scores.shape[0]
    for qi in prange(nq):
        cnt = cnts[qi]
        if cnt > 0:
            _softmax_combine(
                scores[qi], cnt, sel_ids[qi], V, scale, out[qi], weights[qi]
            )


@njit(cache=True)
def _causal_kernel(
    K, Q, V, U, c, scale, p, L, k, k0, k1, eps, fallback_k,
    out, out_ids, out_w, out_cnt, out_visited,
):
    n, d = K.shape
    dv = V.shape[1]
    S = U.shape[0]
    proj = np.empty((S, n), np.float64)
    idsarr = np.empty((S, n), np.int64)
    ebuf = np.empty(d + 1, np.float64)
    qbuf = np.empty(d + 1, np.float64)
    pvals = np.empty(S, np.float64)
    qproj = np.empty(S, np.float64)
    counts = np.empty(n, np.int32)
    srow = np.empty(out_ids.shape[1], np.float64)
    for i in range(n):
        _embed_key(K[i], c, ebuf)
        _project(U, ebuf, pvals)
        for s in range(S):
            pos = _bisect_right(proj[s], i, pvals[s])
            for t in range(i, pos, -1):
                proj[s, t] = proj[s, t - 1]
                idsarr[s, t] = idsarr[s, t - 1]
            proj[s, pos] = pvals[s]
            idsarr[s, pos] = i
        msize = i + 1
        qn = 0.0
        for t in range(d):
            qn += Q[i, t] * Q[i, t]
        qn = math.sqrt(qn)
        if qn <= eps:
            cnt = fallback_k if fallback_k < msize else msize
            winv = 1.0 / cnt
            for t in range(dv):
                acc = 0.0
                for j in range(cnt):
                    acc += V[j, t]
                out[i, t] = acc * winv
            for j in range(cnt):
                out_ids[i, j] = j
                out_w[i, j] = winv
            out_cnt[i] = cnt
            out_visited[i] = 0
            continue
        for t in range(d):
            qbuf[t] = Q[i, t] / qn
        qbuf[d] = 0.0
        _project(U, qbuf, qproj)
        k1_eff = k1
        if msize <= k and msize * p + 1 > k1_eff:
            k1_eff = msize * p + 1
        mark = np.zeros(n, np.uint8)
        cand = np.empty(L * k0, np.int64)
        ncand, visited = _walk_candidates(
            proj, idsarr, msize, p, L, qproj, k0, k1_eff, counts, mark, cand
        )
        cnt = _select_topk(cand, ncand, K, Q[i], k, out_ids[i], srow)
        _softmax_combine(srow, cnt, out_ids[i], V, scale, out[i], out_w[i])
        out_cnt[i] = cnt
        out_visited[i] = visited


# -- python-side wrappers -----------------------------------------------------


def project_and_sort_keys(K_kept: np.ndarray, kept_ids: np.ndarray, c: float, U: np.ndarray):
    """Embed + project kept keys, then sort each simple-index row.

    Ties on projection value keep insertion (row) order, matching what the
    streaming path produces when the same keys arrive one at a time.
    """
    mk = K_kept.shape[0]
    S = U.shape[0]
    raw = np.empty((mk, S), np.float64)
    if mk:
        _project_keys_kernel(K_kept, c, U, raw)
    proj = np.empty((S, mk), np.float64)
    ids = np.empty((S, mk), np.int64)
    pos = np.arange(mk)
    for s in range(S):
        order = np.lexsort((pos, raw[:, s]))
        proj[s] = raw[order, s]
        ids[s] = kept_ids[order]
    return proj, ids


def project_query_rows(Q: np.ndarray, U: np.ndarray, eps: float):
    nq = Q.shape[0]
    qproj = np.empty((nq, U.shape[0]), np.float64)
    qok = np.empty(nq, np.uint8)
    _project_queries_kernel(Q, U, eps, qproj, qok)
    return qproj, qok


def run_batch_query(
    proj, ids, msize, p, L, qprojs, qok, score_points, score_queries,
    k, k0, k1, idcap, width=None,
):
    """Run the packed walk for a block of queries.

    Returns (ids (nq, width), scores, counts, visited); rows flagged not-ok
    in qok come back with count 0 for the caller's fallback policy.
    """
    nq = qprojs.shape[0]
    width = k if width is None else width
    out_ids = np.full((nq, width), -1, np.int64)
    out_scores = np.zeros((nq, width), np.float64)
    out_cnt = np.zeros(nq, np.int64)
    out_visited = np.zeros(nq, np.int64)
    if msize > 0 and nq > 0:
        _batch_query_kernel(
            proj, ids, msize, p, L, qprojs, qok, score_points, score_queries,
            k, k0, k1, idcap, out_ids, out_scores, out_cnt, out_visited,
        )
    return out_ids, out_scores, out_cnt, out_visited


def run_batch_combine(scores, cnts, sel_ids, V, scale):
    nq, width = scores.shape
    out = np.zeros((nq, V.shape[1]), np.float64)
    weights = np.zeros((nq, width), np.float64)
    _batch_combine_kernel(scores, cnts, sel_ids, V, scale, out, weights)
    return out, weights


def run_causal_attention(K, Q, V, U, c, scale, p, L, k, k0, k1, eps, fallback_k, width):
    n = K.shape[0]
    out = np.zeros((n, V.shape[1]), np.float64)
    out_ids = np.full((n, width), -1, np.int64)
    out_w = np.zeros((n, width), np.float64)
    out_cnt = np.zeros(n, np.int64)
    out_visited = np.zeros(n, np.int64)
    _causal_kernel(
        K, Q, V, U, c, scale, p, L, k, k0, k1, eps, fallback_k,
        out, out_ids, out_w, out_cnt, out_visited,
    )
    return out, out_ids, out_w, out_cnt, out_visited


class PackedDci:
    """Batch-query DCI over raw points in their own space (no key lift).

    Build once, query many: backs the k-NN recall/latency benchmark.
    """

    def __init__(self, points: np.ndarray, p: int, L: int, seed: int):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2:
            raise ValueError("points must be a 2-D array")
        self.points = points
        self.p = p
        self.L = L
        self.seed = seed
        m, dim = points.shape
        self.directions = engine_directions(p, L, dim, seed)
        raw = points @ self.directions.T  # (m, S)
        self.proj = np.empty((p * L, m), np.float64)
        self.ids = np.empty((p * L, m), np.int64)
        pos = np.arange(m)
        for s in range(p * L):
            order = np.lexsort((pos, raw[:, s]))
            self.proj[s] = raw[order, s]
            self.ids[s] = pos[order]

    def query_batch(self, queries: np.ndarray, k: int, k0: int, k1: int):
        """Literal-budget batch query; returns (ids, scores, counts, visited)."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        nq = queries.shape[0]
        qprojs = queries @ self.directions.T
        qok = np.ones(nq, np.uint8)
        return run_batch_query(
            self.proj, self.ids, self.points.shape[0], self.p, self.L,
            qprojs, qok, self.points, queries, k, k0, k1, self.points.shape[0],
        )
