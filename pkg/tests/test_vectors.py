import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedmirror.errors import (
    DimensionMismatchError,
    DomainError,
    EmptyAggregationError,
    NonFiniteError,
)
from fedmirror.vectors import elementwise, mean_update, weighted_norm_sq


def finite_vectors(n, lo=-100.0, hi=100.0):
    return arrays(
        dtype=np.float64,
        shape=(n,),
        elements=st.floats(min_value=lo, max_value=hi, allow_nan=False, allow_infinity=False),
    )


class TestWeightedNormSq:
    def test_zero_vector_is_zero(self):
        assert weighted_norm_sq(np.zeros(4), np.array([1.0, 2.0, 3.0, 4.0])) == 0.0
        assert weighted_norm_sq(np.zeros(4), np.ones(4), inverse=True) == 0.0

    def test_inverse_hand_value(self):
        # 0.25 * 1 + 0.25 * 0.25
        got = weighted_norm_sq(np.array([0.5, 0.5]), np.array([1.0, 4.0]), inverse=True)
        assert got == pytest.approx(0.3125, abs=0.0)

    def test_identity_diag(self):
        assert weighted_norm_sq(np.array([1.0, 1.0]), np.ones(2)) == 2.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            weighted_norm_sq(np.ones(3), np.ones(2))

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            weighted_norm_sq(np.array([1.0, np.nan]), np.ones(2))

    def test_nonpositive_diag(self):
        with pytest.raises(DomainError):
            weighted_norm_sq(np.ones(2), np.array([1.0, 0.0]))

    def test_identity_equals_l2_on_1000_random_vectors(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            x = rng.normal(0.0, 3.0, 8)
            assert weighted_norm_sq(x, np.ones(8)) == pytest.approx(float(np.dot(x, x)), rel=1e-15)

    @given(x=finite_vectors(6))
    @settings(max_examples=200, deadline=None)
    def test_identity_equals_l2_property(self, x):
        assert weighted_norm_sq(x, np.ones(6)) == pytest.approx(float(np.dot(x, x)), rel=1e-12, abs=1e-12)

    def test_cauchy_schwarz_sanity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            x = rng.normal(size=5)
            g = np.exp(rng.normal(size=5))
            fwd = weighted_norm_sq(x, g)
            inv = weighted_norm_sq(x, g, inverse=True)
            plain = float(np.dot(x, x))
            assert fwd * inv >= plain**2 * (1.0 - 1e-12)


class TestElementwise:
    def test_square(self):
        np.testing.assert_array_equal(elementwise("square", np.array([-2.0, 3.0])), [4.0, 9.0])

    def test_sqrt(self):
        np.testing.assert_array_equal(elementwise("sqrt", np.array([4.0, 9.0])), [2.0, 3.0])

    def test_add_scalar_tiny(self):
        got = elementwise("add-scalar", np.array([0.0, 1.0]), scalar=1e-9)
        np.testing.assert_array_equal(got, [1e-9, 1.0 + 1e-9])

    def test_reciprocal(self):
        np.testing.assert_array_equal(elementwise("reciprocal", np.array([2.0, 4.0])), [0.5, 0.25])

    def test_sqrt_negative_names_first_offender(self):
        with pytest.raises(DomainError) as err:
            elementwise("sqrt", np.array([1.0, -4.0, -9.0]))
        assert err.value.index == 1

    def test_reciprocal_zero_names_first_offender(self):
        with pytest.raises(DomainError) as err:
            elementwise("reciprocal", np.array([1.0, 0.0]))
        assert err.value.index == 1

    def test_unknown_kind(self):
        with pytest.raises(DomainError):
            elementwise("cube", np.ones(2))

    def test_add_scalar_requires_scalar(self):
        with pytest.raises(DomainError):
            elementwise("add-scalar", np.ones(2))


class TestMeanUpdate:
    def test_two_clients(self):
        got = mean_update([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_array_equal(got, [0.5, 0.5])

    def test_singleton(self):
        np.testing.assert_array_equal(mean_update([np.array([2.0, 2.0])]), [2.0, 2.0])

    def test_empty_list(self):
        with pytest.raises(EmptyAggregationError):
            mean_update([])

    def test_matches_naive_loop_exactly(self):
        rng = np.random.default_rng(11)
        vecs = [rng.normal(size=7) for _ in range(3)]
        naive = np.zeros(7)
        for v in vecs:
            naive = naive + v
        naive = naive / len(vecs)
        got = mean_update(vecs)
        assert np.array_equal(got, naive)  # zero-ulp agreement with the naive sum

    def test_fixed_order_is_bit_identical(self):
        rng = np.random.default_rng(13)
        vecs = [rng.normal(size=9) for _ in range(6)]
        a = mean_update(vecs)
        b = mean_update(list(vecs))
        assert a.tobytes() == b.tobytes()

    def test_permutation_within_four_ulp(self):
        rng = np.random.default_rng(17)
        vecs = [rng.normal(size=9) for _ in range(6)]
        a = mean_update(vecs)
        b = mean_update(vecs[::-1])
        for ai, bi in zip(a, b):
            assert abs(ai - bi) <= 4 * math.ulp(max(abs(ai), abs(bi)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mean_update([np.ones(2), np.ones(3)])
