"""Exact attention path: masks, row weights, top-k oracle."""

import math

import numpy as np
import pytest

from knnattn.core import (
    AttentionProblem,
    Mask,
    MaskKind,
    ValidationError,
    as_matrix,
    attention_row_weights,
    brute_force_topk,
    vanilla_attention,
)


def make_problem(n, m, d, d_v, mask=None, seed=0, dtype=np.float32, scale=None):
    rng = np.random.default_rng(seed)
    return AttentionProblem(
        queries=as_matrix(rng.standard_normal((n, d)), dtype),
        keys=as_matrix(rng.standard_normal((m, d)), dtype),
        values=as_matrix(rng.standard_normal((m, d_v)), dtype),
        mask=mask or Mask.none(),
        scale=scale,
    )


class TestContainers:
    def test_as_matrix_rejects_nan(self):
        with pytest.raises(ValidationError):
            as_matrix([[1.0, float("nan")]], np.float32)

    def test_as_matrix_rejects_inf(self):
        with pytest.raises(ValidationError):
            as_matrix([[1.0, float("inf")]], np.float64)

    def test_as_matrix_rejects_wrong_rank(self):
        with pytest.raises(ValidationError):
            as_matrix([1.0, 2.0])

    def test_as_matrix_rejects_int_dtype(self):
        with pytest.raises(ValidationError):
            as_matrix([[1, 2]], np.int32)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValidationError):
            AttentionProblem(
                queries=as_matrix(rng.standard_normal((4, 3))),
                keys=as_matrix(rng.standard_normal((5, 4))),
                values=as_matrix(rng.standard_normal((5, 2))),
            )

    def test_key_value_count_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValidationError):
            AttentionProblem(
                queries=as_matrix(rng.standard_normal((4, 3))),
                keys=as_matrix(rng.standard_normal((5, 3))),
                values=as_matrix(rng.standard_normal((6, 2))),
            )

    def test_mixed_dtypes_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValidationError):
            AttentionProblem(
                queries=as_matrix(rng.standard_normal((4, 3)), np.float32),
                keys=as_matrix(rng.standard_normal((5, 3)), np.float64),
                values=as_matrix(rng.standard_normal((5, 2)), np.float32),
            )

    def test_causal_needs_square(self):
        with pytest.raises(ValidationError):
            make_problem(3, 4, 2, 2, mask=Mask.causal())

    def test_fully_masked_row_rejected(self):
        bits = np.ones((3, 4), dtype=bool)
        bits[1] = False
        with pytest.raises(ValidationError, match="row 1"):
            make_problem(3, 4, 2, 2, mask=Mask.explicit(bits))

    def test_default_scale(self):
        prob = make_problem(2, 3, 16, 2)
        assert prob.scale == pytest.approx(1.0 / 4.0)

    def test_explicit_scale_kept(self):
        prob = make_problem(2, 3, 16, 2, scale=1.0)
        assert prob.scale == 1.0


class TestVanillaAttention:
    def test_single_key_weight_is_one(self):
        prob = AttentionProblem(
            queries=as_matrix([[0.3, -0.7]]),
            keys=as_matrix([[1.0, 2.0]]),
            values=as_matrix([[2.0]]),
        )
        out = vanilla_attention(prob)
        np.testing.assert_allclose(out, [[2.0]], rtol=0, atol=0)

    def test_equal_logits_average_values(self):
        # two keys with identical inner products split the weight evenly
        prob = AttentionProblem(
            queries=as_matrix([[1.0, 0.0]]),
            keys=as_matrix([[0.0, 1.0], [0.0, -1.0]]),
            values=as_matrix([[1.0, 0.0], [0.0, 1.0]]),
        )
        out = vanilla_attention(prob)
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-7)

    def test_causal_first_row_is_first_value(self):
        prob = make_problem(4, 4, 8, 3, mask=Mask.causal(), seed=3)
        out = vanilla_attention(prob)
        np.testing.assert_array_equal(out[0], prob.values[0])

    def test_row_sums_unmasked(self):
        prob = make_problem(16, 40, 8, 4, seed=1)
        for i in range(prob.n):
            w = attention_row_weights(prob, i)
            assert abs(w.sum() - 1.0) < 1e-6

    def test_permuting_keys_and_values_together_is_invariant(self):
        prob = make_problem(8, 32, 8, 4, seed=2, dtype=np.float64)
        out = vanilla_attention(prob)
        rng = np.random.default_rng(7)
        perm = rng.permutation(prob.m)
        shuffled = AttentionProblem(
            queries=prob.queries,
            keys=as_matrix(prob.keys[perm], np.float64),
            values=as_matrix(prob.values[perm], np.float64),
        )
        np.testing.assert_allclose(vanilla_attention(shuffled), out, atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        prob = AttentionProblem(
            queries=as_matrix([[200.0, 0.0]]),
            keys=as_matrix([[300.0, 0.0], [-300.0, 0.0]]),
            values=as_matrix([[1.0], [0.0]]),
            scale=1.0,
        )
        out = vanilla_attention(prob)
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0]], atol=1e-7)

    def test_explicit_mask_zeroes_hidden_keys(self):
        bits = np.array([[True, False, True], [False, True, True]])
        prob = AttentionProblem(
            queries=as_matrix(np.eye(2)),
            keys=as_matrix(np.ones((3, 2))),
            values=as_matrix(np.diag([1.0, 2.0, 3.0])),
            mask=Mask.explicit(bits),
        )
        out = vanilla_attention(prob)
        np.testing.assert_allclose(out[0], [0.5, 0.0, 1.5], atol=1e-7)
        np.testing.assert_allclose(out[1], [0.0, 1.0, 1.5], atol=1e-7)


class TestRowWeights:
    def test_uniform_logits(self):
        prob = AttentionProblem(
            queries=as_matrix([[0.0, 0.0]]),
            keys=as_matrix(np.ones((3, 2))),
            values=as_matrix(np.ones((3, 1))),
        )
        np.testing.assert_allclose(
            attention_row_weights(prob, 0), [1 / 3, 1 / 3, 1 / 3], atol=1e-7
        )

    def test_mask_forces_weight(self):
        bits = np.array([[True, False]])
        prob = AttentionProblem(
            queries=as_matrix([[1.0]]),
            keys=as_matrix([[10.0], [0.0]]),
            values=as_matrix([[1.0], [2.0]]),
            mask=Mask.explicit(bits),
        )
        w = attention_row_weights(prob, 0)
        assert w[0] == 1.0 and w[1] == 0.0

    def test_masked_entries_exactly_zero(self):
        bits = np.ones((4, 16), dtype=bool)
        bits[:, 3::4] = False
        prob = make_problem(4, 16, 8, 2, mask=Mask.explicit(bits), seed=4)
        w = attention_row_weights(prob, 2)
        assert (w[~bits[2]] == 0.0).all()
        assert abs(w[bits[2]].sum() - 1.0) < 1e-6

    def test_matches_extended_precision_softmax(self):
        # independent oracle: raw softmax evaluated term-by-term in mpmath
        import mpmath

        prob = make_problem(1, 8, 6, 2, seed=9, dtype=np.float64)
        logits = [
            mpmath.mpf(float(prob.keys[j] @ prob.queries[0])) * prob.scale
            for j in range(8)
        ]
        exps = [mpmath.e**val for val in logits]
        total = sum(exps)
        expected = np.array([float(e / total) for e in exps])
        w = attention_row_weights(prob, 0)
        np.testing.assert_allclose(w, expected, atol=1e-12)
        # the f32 path agrees at its own precision
        prob32 = make_problem(1, 8, 6, 2, seed=9, dtype=np.float32)
        np.testing.assert_allclose(attention_row_weights(prob32, 0), expected, atol=1e-6)

    def test_shift_invariance(self):
        # adding a constant to every logit of a row leaves the weights alone
        prob = make_problem(1, 12, 4, 2, seed=11, dtype=np.float64)
        base = attention_row_weights(prob, 0)
        logits = (prob.keys @ prob.queries[0]) * prob.scale
        for c in (5.0, -40.0, 123.456):
            l2 = logits + c
            w = np.exp(l2 - l2.max())
            w /= w.sum()
            np.testing.assert_allclose(w, base, atol=1e-12)

    def test_row_index_bounds(self):
        prob = make_problem(3, 4, 2, 2)
        with pytest.raises(ValidationError):
            attention_row_weights(prob, 3)


class TestBruteForceTopk:
    def test_direct_ordering(self):
        prob = AttentionProblem(
            queries=as_matrix([[1.0]]),
            keys=as_matrix([[5.0], [1.0], [9.0]]),
            values=as_matrix([[0.0], [0.0], [0.0]]),
        )
        assert brute_force_topk(prob, 0, 2) == [2, 0]

    def test_causal_restriction(self):
        prob = AttentionProblem(
            queries=as_matrix([[1.0], [1.0], [1.0]]),
            keys=as_matrix([[5.0], [1.0], [9.0]]),
            values=as_matrix([[0.0], [0.0], [0.0]]),
            mask=Mask.causal(),
        )
        assert brute_force_topk(prob, 1, 2) == [0, 1]

    def test_matches_full_sort(self):
        prob = make_problem(4, 256, 16, 2, seed=13)
        for i in range(4):
            logits = prob.keys @ prob.queries[i]
            want = sorted(range(256), key=lambda j: (-logits[j], j))[:10]
            assert brute_force_topk(prob, i, 10) == want

    def test_ties_break_to_smaller_id(self):
        prob = AttentionProblem(
            queries=as_matrix([[0.0, 0.0]]),
            keys=as_matrix(np.ones((5, 2))),
            values=as_matrix(np.zeros((5, 1))),
        )
        assert brute_force_topk(prob, 0, 3) == [0, 1, 2]

    def test_k_of_m_returns_all_unmasked(self):
        bits = np.ones((2, 8), dtype=bool)
        bits[0, [1, 5]] = False
        prob = make_problem(2, 8, 4, 2, mask=Mask.explicit(bits), seed=17)
        got = brute_force_topk(prob, 0, 8)
        assert sorted(got) == [0, 2, 3, 4, 6, 7]

    def test_k_must_be_positive(self):
        prob = make_problem(2, 3, 2, 2)
        with pytest.raises(ValidationError):
            brute_force_topk(prob, 0, 0)


class TestMaskRows:
    def test_causal_row(self):
        mask = Mask.causal()
        np.testing.assert_array_equal(
            mask.row(2, 5), [True, True, True, False, False]
        )

    def test_none_row_is_none(self):
        assert Mask.none().row(0, 4) is None

    def test_kind_enum_values(self):
        assert {k.value for k in MaskKind} == {"none", "causal", "explicit"}
