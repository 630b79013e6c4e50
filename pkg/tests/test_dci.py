"""Reference projection index: construction, walk semantics, updates, snapshots."""

import numpy as np
import pytest

from knnattn.core import ValidationError
from knnattn.dci import (
    DciIndex,
    QuerySpec,
    brute_force_query,
    load_snapshot,
    sample_directions,
)


def random_instance(seed, m=None, d=None):
    rng = np.random.default_rng(seed)
    m = m or int(rng.integers(2, 200))
    d = d or int(rng.integers(2, 12))
    return rng.standard_normal((m, d)), rng.standard_normal(d), rng


class TestQuerySpec:
    def test_ordering_enforced(self):
        with pytest.raises(ValidationError):
            QuerySpec(k=5, k0=3, k1=10)
        with pytest.raises(ValidationError):
            QuerySpec(k=2, k0=4, k1=3)
        with pytest.raises(ValidationError):
            QuerySpec(k=0, k0=1, k1=1)

    def test_exhaustive_budgets(self):
        spec = QuerySpec.exhaustive(100, 3)
        assert spec.k == spec.k0 == 100
        assert spec.k1 == 301


class TestDirections:
    def test_unit_norm_and_shape(self):
        dirs = sample_directions(4, 3, 17, seed=5)
        assert dirs.shape == (12, 17)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)

    def test_seed_reproducible(self):
        np.testing.assert_array_equal(
            sample_directions(3, 2, 5, seed=9), sample_directions(3, 2, 5, seed=9)
        )

    def test_bad_dims_rejected(self):
        with pytest.raises(ValidationError):
            sample_directions(0, 1, 4, seed=0)
        with pytest.raises(ValidationError):
            sample_directions(1, 1, 0, seed=0)


class TestConstruct:
    def test_empty_index_queries_empty(self):
        index = DciIndex.construct(np.zeros((0, 4)), p=2, L=2, seed=0)
        assert index.query(np.ones(4), QuerySpec(1, 1, 2)) == []

    def test_single_point_always_returned(self):
        index = DciIndex.construct(np.array([[0.5, -0.5]]), p=2, L=1, seed=0)
        rng = np.random.default_rng(1)
        for _ in range(10):
            out = index.query(rng.standard_normal(2), QuerySpec(1, 1, 4))
            assert [pid for pid, _ in out] == [0]

    def test_same_seed_same_outputs(self):
        pts, q, _ = random_instance(2)
        a = DciIndex.construct(pts, 3, 2, seed=7)
        b = DciIndex.construct(pts, 3, 2, seed=7)
        np.testing.assert_array_equal(a.directions, b.directions)
        spec = QuerySpec(5, 10, 40)
        assert a.query(q, spec) == b.query(q, spec)

    def test_invariants_hold(self):
        pts, _, _ = random_instance(3, m=30)
        index = DciIndex.construct(pts, 2, 3, seed=1)
        index.check_invariants()
        assert len(index) == 30


class TestHandTracedWalk:
    def test_one_dimensional_walk(self):
        # three points projecting (up to direction sign) to {-1, 0, 2};
        # query projects to 0.4, so the first expansion visits the point
        # at 0, which alone fills the candidate budget k0=1
        points = np.array([[-1.0], [0.0], [2.0]])
        index = DciIndex.construct(points, p=1, L=1, seed=0)
        out = index.query(np.array([0.4]), QuerySpec(k=1, k0=1, k1=2))
        assert out == [(1, 0.0)]

    def test_walk_expands_both_sides(self):
        # query at 0.4: expansion order by |proj - 0.4| is 0, -1, 2
        points = np.array([[-1.0], [0.0], [2.0]])
        index = DciIndex.construct(points, p=1, L=1, seed=0)
        out = index.query(np.array([0.4]), QuerySpec(k=3, k0=3, k1=4))
        assert {pid for pid, _ in out} == {0, 1, 2}
        # ranked by inner product with the query (0.4 * x), descending
        assert [pid for pid, _ in out] == [2, 1, 0]


class TestExactness:
    def test_exhaustive_equals_brute_force(self):
        for seed in range(25):
            pts, q, _ = random_instance(seed)
            m = pts.shape[0]
            index = DciIndex.construct(pts, p=2, L=1, seed=seed)
            spec = QuerySpec.exhaustive(m, 2)
            got = [pid for pid, _ in index.query(q, spec)]
            assert got == brute_force_query(pts, q, m)

    def test_scores_are_inner_products(self):
        pts, q, _ = random_instance(99, m=40)
        index = DciIndex.construct(pts, p=2, L=1, seed=0)
        for pid, score in index.query(q, QuerySpec.exhaustive(40, 2)):
            assert score == pytest.approx(float(pts[pid] @ q), abs=1e-12)


class TestIncrementalUpdates:
    def test_insert_into_empty_then_query(self):
        index = DciIndex(num_simple=2, num_composite=2, dim=3, seed=4)
        index.insert(np.array([1.0, 2.0, 2.0]), point_id=7)
        out = index.query(np.array([1.0, 0.0, 0.0]), QuerySpec(1, 1, 8))
        assert [pid for pid, _ in out] == [7]

    def test_batch_equals_incremental(self):
        rng = np.random.default_rng(11)
        for seed in range(20):
            pts, _, _ = random_instance(200 + seed, m=int(rng.integers(4, 80)))
            cut = pts.shape[0] // 2
            whole = DciIndex.construct(pts, p=3, L=2, seed=seed)
            partial = DciIndex.construct(pts[:cut], p=3, L=2, seed=seed)
            for i in range(cut, pts.shape[0]):
                partial.insert(pts[i], point_id=i)
            spec = QuerySpec(4, 8, 24)
            for _ in range(5):
                q = rng.standard_normal(pts.shape[1])
                assert whole.query(q, spec) == partial.query(q, spec)

    def test_duplicate_id_rejected(self):
        index = DciIndex(2, 1, 2, seed=0)
        index.insert(np.zeros(2), point_id=1)
        with pytest.raises(ValidationError):
            index.insert(np.ones(2), point_id=1)

    def test_delete_removes_point(self):
        pts, q, _ = random_instance(31, m=20)
        index = DciIndex.construct(pts, 2, 2, seed=0)
        spec = QuerySpec.exhaustive(20, 2)
        best = index.query(q, spec)[0][0]
        index.delete(best)
        index.check_invariants()
        remaining = {pid for pid, _ in index.query(q, spec)}
        assert best not in remaining
        assert len(remaining) == 19

    def test_delete_missing_rejected(self):
        index = DciIndex(1, 1, 2, seed=0)
        with pytest.raises(ValidationError):
            index.delete(3)

    def test_candidate_soundness_under_churn(self):
        # returned ids were inserted and never deleted
        rng = np.random.default_rng(12)
        index = DciIndex(2, 2, 4, seed=3)
        alive = set()
        next_id = 0
        for step in range(120):
            if alive and rng.random() < 0.3:
                victim = int(rng.choice(sorted(alive)))
                index.delete(victim)
                alive.remove(victim)
            else:
                index.insert(rng.standard_normal(4), point_id=next_id)
                alive.add(next_id)
                next_id += 1
            if alive and step % 10 == 0:
                out = index.query(rng.standard_normal(4), QuerySpec(3, 6, 30))
                assert {pid for pid, _ in out} <= alive
        index.check_invariants()


class TestMonotoneRecall:
    def test_recall_nondecreasing_in_budgets(self):
        # low dimension so the walk's recall actually moves with the budget
        k = 5
        k1_grid = [8, 16, 32, 64, 128]
        k0_grid = [5, 10, 20, 40]
        sums_k1 = np.zeros(len(k1_grid))
        sums_k0 = np.zeros(len(k0_grid))
        trials = 100
        for seed in range(trials):
            rng = np.random.default_rng(1000 + seed)
            pts = rng.standard_normal((60, 3))
            q = rng.standard_normal(3)
            truth = set(brute_force_query(pts, q, k))
            index = DciIndex.construct(pts, p=2, L=1, seed=seed)
            for gi, k1 in enumerate(k1_grid):
                got = {pid for pid, _ in index.query(q, QuerySpec(k, 20, max(20, k1)))}
                sums_k1[gi] += len(got & truth) / k
            for gi, k0 in enumerate(k0_grid):
                got = {pid for pid, _ in index.query(q, QuerySpec(k, k0, 120))}
                sums_k0[gi] += len(got & truth) / k
        assert (np.diff(sums_k1) >= -1e-9).all(), sums_k1 / trials
        assert (np.diff(sums_k0) >= -1e-9).all(), sums_k0 / trials


class TestSnapshots:
    def test_roundtrip_bytes(self, tmp_path):
        pts, _, _ = random_instance(41, m=25)
        index = DciIndex.construct(pts, 2, 2, seed=5)
        path1 = tmp_path / "a.dci"
        path2 = tmp_path / "b.dci"
        index.save_snapshot(path1)
        snap = load_snapshot(path1)
        snap.save(path2)
        assert path1.read_bytes() == path2.read_bytes()

    def test_snapshot_contents(self, tmp_path):
        pts, _, _ = random_instance(43, m=10)
        index = DciIndex.construct(pts, 3, 2, seed=6)
        path = tmp_path / "c.dci"
        index.save_snapshot(path)
        snap = load_snapshot(path)
        assert (snap.num_simple, snap.num_composite) == (3, 2)
        assert snap.count == 10
        assert len(snap.projections) == 6
        for proj, ids in zip(snap.projections, snap.ids):
            assert proj.shape == (10,) and ids.shape == (10,)
            assert (np.diff(proj) >= 0).all()
            assert sorted(ids) == list(range(10))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dci"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValidationError, match="magic"):
            load_snapshot(path)

    def test_truncated_entries(self, tmp_path):
        pts, _, _ = random_instance(47, m=12)
        index = DciIndex.construct(pts, 2, 1, seed=1)
        path = tmp_path / "t.dci"
        index.save_snapshot(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ValidationError, match="truncated|trailing"):
            load_snapshot(path)


class TestDeterminism:
    def test_repeated_queries_identical(self):
        pts, q, _ = random_instance(53, m=70)
        index = DciIndex.construct(pts, 3, 2, seed=2)
        spec = QuerySpec(5, 12, 48)
        first = index.query(q, spec)
        for _ in range(5):
            assert index.query(q, spec) == first


class TestBruteForceQuery:
    def test_direct_ordering(self):
        pts = np.array([[1.0], [3.0], [2.0]])
        assert brute_force_query(pts, np.array([1.0]), 2) == [1, 2]

    def test_k_above_m_returns_all_ranked(self):
        pts = np.array([[1.0], [3.0], [2.0]])
        assert brute_force_query(pts, np.array([1.0]), 10) == [1, 2, 0]

    def test_empty_points(self):
        assert brute_force_query(np.zeros((0, 3)), np.ones(3), 4) == []


class TestIsotropicRecallTarget:
    def test_gaussian_r65_budgeted_recall(self):
        """Stated target: recall@10 >= 0.9 on 10k iid Gaussian points in 65
        dims at p=10, L=2, k0=100, k1=1000.

        Runs on the packed engine, which is pinned query-for-query to the
        reference walk above. On isotropic data every point's projection
        ranks near-uniformly, so the all-p hit requirement starves at this
        budget; the walk needs near-exhaustive k1 here (see the frontier
        printed by the acceptance suite). Kept at the stated threshold
        rather than tuned down.
        """
        from knnattn._engine import PackedDci
        from knnattn.bench import brute_force_ip_topk

        rng = np.random.default_rng(65)
        pts = rng.standard_normal((10000, 65))
        queries = rng.standard_normal((500, 65))
        index = PackedDci(pts, p=10, L=2, seed=0)
        ids, _, cnts, _ = index.query_batch(queries, 10, 100, 1000)
        truth = brute_force_ip_topk(pts, queries, 10)
        recall = np.mean(
            [len(set(map(int, ids[i, : cnts[i]])) & set(map(int, truth[i]))) / 10
             for i in range(queries.shape[0])]
        )
        assert recall >= 0.9, f"measured recall {recall:.3f}"
