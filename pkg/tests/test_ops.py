"""Hard/soft thresholding against brute-force oracles and algebraic properties."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparseskip.ops import SparsityTarget, resolve_k, soft_threshold, sparsity, top_k, top_k_mask


def brute_force_best_sparse_error(v, k):
    """Minimal ||x - v||^2 over all x with at most k nonzeros, by subset enumeration."""
    d = len(v)
    best = np.inf
    for subset in itertools.combinations(range(d), k):
        x = np.zeros(d)
        x[list(subset)] = v[list(subset)]
        best = min(best, float(np.sum((x - v) ** 2)))
    return best


@st.composite
def vector_and_k(draw, max_dim=30):
    d = draw(st.integers(1, max_dim))
    v = draw(arrays(np.float64, d, elements=st.floats(-1e6, 1e6, allow_nan=False)))
    k = draw(st.integers(1, d))
    return v, k


class TestTopK:
    def test_keeps_largest_magnitudes(self):
        out = top_k(np.array([3.0, -5.0, 1.0, 0.5]), 2)
        assert np.array_equal(out, [3.0, -5.0, 0.0, 0.0])

    def test_full_k_is_identity(self):
        v = np.array([0.3, -1.2, 0.0, 7.5])
        assert np.array_equal(top_k(v, 4), v)

    def test_tie_break_keeps_lowest_index(self):
        assert np.array_equal(top_k(np.array([2.0, -2.0, 1.0]), 1), [2.0, 0.0, 0.0])

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            top_k(np.array([1.0, 2.0]), 3)
        with pytest.raises(ValueError):
            top_k(np.array([1.0, 2.0]), 0)

    def test_matches_brute_force_subset_minimization(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            d = int(rng.integers(1, 13))
            v = rng.standard_normal(d)
            for k in range(1, d + 1):
                achieved = float(np.sum((top_k(v, k) - v) ** 2))
                assert achieved <= brute_force_best_sparse_error(v, k) + 1e-12

    @settings(max_examples=200)
    @given(vector_and_k())
    def test_idempotent(self, vk):
        v, k = vk
        once = top_k(v, k)
        assert np.array_equal(top_k(once, k), once)

    @settings(max_examples=200)
    @given(vector_and_k())
    def test_magnitude_monotonicity(self, vk):
        v, k = vk
        kept = top_k_mask(v, k)
        dropped = np.setdiff1d(np.arange(len(v)), kept)
        if dropped.size:
            assert np.abs(v[kept]).min() >= np.abs(v[dropped]).max()

    @settings(max_examples=200)
    @given(vector_and_k())
    def test_sparsity_lower_bound(self, vk):
        v, k = vk
        assert sparsity(top_k(v, k)) >= 1.0 - k / len(v) - 1e-15


class TestTopKMask:
    def test_mask_restriction_equals_top_k(self):
        v = np.array([3.0, -5.0, 1.0])
        kept = top_k_mask(v, 2)
        assert set(kept) == {0, 1}
        restricted = np.zeros_like(v)
        restricted[kept] = v[kept]
        assert np.array_equal(restricted, top_k(v, 2))

    def test_full_k_gives_all_indices(self):
        assert list(top_k_mask(np.array([1.0, 2.0, 3.0]), 3)) == [0, 1, 2]

    def test_all_zero_vector_tie_break(self):
        assert list(top_k_mask(np.zeros(3), 1)) == [0]

    @settings(max_examples=200)
    @given(vector_and_k())
    def test_mask_consistency(self, vk):
        v, k = vk
        kept = top_k_mask(v, k)
        restricted = np.zeros_like(v)
        restricted[kept] = v[kept]
        assert np.array_equal(restricted, top_k(v, k))


class TestSoftThreshold:
    def test_shrinks_toward_zero(self):
        out = soft_threshold(np.array([3.0, -0.5, 1.0]), 1.0)
        assert np.allclose(out, [2.0, 0.0, 0.0])

    def test_zero_tau_is_identity(self):
        v = np.array([1.5, -2.0, 0.0])
        assert np.allclose(soft_threshold(v, 0.0), v)

    def test_full_shrinkage(self):
        assert np.array_equal(soft_threshold(np.array([0.4, -0.9]), 1.0), [0.0, 0.0])

    def test_negative_tau_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(np.array([1.0]), -0.1)

    def test_matches_grid_minimization(self):
        # independent oracle: per-coordinate argmin of 0.5 (x - v)^2 + tau |x|
        # over a grid of resolution 1e-6
        rng = np.random.default_rng(3)
        cases = [(np.array([3.0, -0.5, 1.0, 0.2, -1.4, 0.0, 2.2, -2.0]) / 1.5, 1.0 / 1.5)]
        for _ in range(2):
            cases.append((rng.uniform(-2, 2, size=8), float(rng.uniform(0, 1.5))))
        step = 1e-6
        for v, tau in cases:
            ours = soft_threshold(v, tau)
            for i, vi in enumerate(v):
                lo, hi = -abs(vi) - 0.5, abs(vi) + 0.5
                grid = np.arange(lo, hi, step)
                objective = 0.5 * (grid - vi) ** 2 + tau * np.abs(grid)
                assert abs(ours[i] - grid[np.argmin(objective)]) <= step + 1e-9


class TestSparsity:
    def test_counts_exact_zeros(self):
        assert sparsity(np.array([0.0, 0.0, 1.0, 0.0])) == 0.75
        assert sparsity(np.zeros(5)) == 1.0
        assert sparsity(np.ones(5)) == 0.0


class TestSparsityTarget:
    def test_fraction_resolution(self):
        assert SparsityTarget(fraction=0.9).resolve(200) == 20
        assert SparsityTarget(fraction=0.0).resolve(7) == 7
        # rounding to nearest, clamped into [1, d]
        assert SparsityTarget(fraction=0.95).resolve(10) == 1
        assert SparsityTarget(fraction=0.99).resolve(10) == 1

    def test_count_resolution(self):
        assert SparsityTarget(count=3).resolve(10) == 3
        with pytest.raises(ValueError):
            SparsityTarget(count=11).resolve(10)

    def test_constructor_validation(self):
        with pytest.raises(ValueError):
            SparsityTarget()
        with pytest.raises(ValueError):
            SparsityTarget(count=2, fraction=0.5)
        with pytest.raises(ValueError):
            SparsityTarget(fraction=1.0)
        with pytest.raises(ValueError):
            SparsityTarget(count=0)

    def test_resolve_k_accepts_plain_ints(self):
        assert resolve_k(4, 10) == 4
        assert resolve_k(SparsityTarget(fraction=0.5), 10) == 5
