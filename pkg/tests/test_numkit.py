import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specsparse import numkit
from specsparse.errors import ContractViolation


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32)
        out = numkit.matmul(np.eye(2, dtype=np.float32), b)
        np.testing.assert_array_equal(out, b)

    def test_direct_arithmetic(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose(numkit.matmul(a, b), [[19, 22], [43, 50]])

    def test_associativity_against_independent_order(self):
        rng = numkit.prng_stream(7)
        a, b, c = (rng.standard_normal((3, 3)) for _ in range(3))
        left = numkit.matmul(numkit.matmul(a, b), c)
        right = numkit.matmul(a, numkit.matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            numkit.matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_non_finite_rejected(self):
        with pytest.raises(ContractViolation):
            numkit.matmul(np.array([[np.nan, 0.0]]), np.ones((2, 1)))

    def test_result_is_float32(self):
        out = numkit.matmul(np.ones((2, 2), dtype=np.float64), np.ones((2, 2)))
        assert out.dtype == np.float32


class TestRowSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(numkit.row_softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_shift_invariance(self):
        row = np.array([[0.3, -1.2, 2.0]])
        shifted = row + 17.5
        np.testing.assert_allclose(
            numkit.row_softmax(row), numkit.row_softmax(shifted), atol=1e-7
        )

    def test_stability_limit(self):
        out = numkit.row_softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-9)

    def test_prefix_lengths_zero_out_tail(self):
        out = numkit.row_softmax(np.array([[1.0, 2.0, 3.0], [1.0, 1.0, 9.0]]), [2, 1])
        assert out[0, 2] == 0.0
        assert out[1, 1] == 0.0 and out[1, 2] == 0.0
        np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0], atol=1e-6)

    def test_empty_prefix_rejected(self):
        with pytest.raises(ContractViolation):
            numkit.row_softmax(np.ones((2, 3)), [2, 0])

    @given(
        st.lists(
            st.lists(st.floats(-50, 50), min_size=1, max_size=8),
            min_size=1,
            max_size=6,
        )
    )
    def test_rows_are_distributions(self, rows):
        width = max(len(r) for r in rows)
        m = np.zeros((len(rows), width))
        lengths = []
        for i, r in enumerate(rows):
            m[i, : len(r)] = r
            lengths.append(len(r))
        out = numkit.row_softmax(m, lengths)
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestTopkIndices:
    def test_basic(self):
        np.testing.assert_array_equal(numkit.topk_indices([0.1, 0.7, 0.2], 2), [1, 2])

    def test_tie_breaks_to_lowest_index(self):
        np.testing.assert_array_equal(numkit.topk_indices([0.5, 0.5, 0.5], 1), [0])

    def test_saturation(self):
        np.testing.assert_array_equal(numkit.topk_indices([3.0, 1.0, 2.0], 10), [0, 1, 2])

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            numkit.topk_indices([], 1)

    def test_k_below_one_rejected(self):
        with pytest.raises(ContractViolation):
            numkit.topk_indices([1.0], 0)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=64),
        st.integers(1, 64),
    )
    def test_matches_brute_force(self, scores, k):
        got = numkit.topk_indices(scores, k)
        ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        expected = sorted(ranked[: min(k, len(scores))])
        assert list(got) == expected
        assert np.all(np.diff(got) > 0)  # strictly increasing IndexSet


class TestPrngStream:
    def test_same_seed_identical(self):
        a = numkit.prng_stream(42).standard_normal(1000)
        b = numkit.prng_stream(42).standard_normal(1000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = numkit.prng_stream(1).standard_normal(1000)
        b = numkit.prng_stream(2).standard_normal(1000)
        assert (a != b).any()

    def test_sample_statistics(self):
        draws = numkit.prng_stream(1234).standard_normal(100_000)
        assert abs(draws.mean()) < 0.02
        assert 0.97 < draws.var() < 1.03
