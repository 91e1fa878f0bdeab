"""Loss gradients, permutation matching, and error aggregation."""

import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from unmixlab.metrics import (
    DegenerateSpectrumError,
    ErrorPair,
    aggregate_errors,
    format_mean_std,
    match_endmembers,
    mse_loss,
    per_endmember_rmse,
    rmse_abundances,
    sad_endmembers,
    sad_loss,
    unmixing_errors,
)


class TestMseLoss:
    def test_zero_on_identical(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        value, grad = mse_loss(x, x)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_unit_offset(self):
        x = np.zeros((3, 2))
        value, _ = mse_loss(x, np.ones((3, 2)))
        assert value == pytest.approx(1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 3))
        x_hat = rng.normal(size=(5, 3))
        _, grad = mse_loss(x, x_hat)
        h = 1e-6
        for i in range(5):
            for j in range(3):
                xp = x_hat.copy(); xp[i, j] += h
                xm = x_hat.copy(); xm[i, j] -= h
                fd = (mse_loss(x, xp)[0] - mse_loss(x, xm)[0]) / (2 * h)
                assert abs(fd - grad[i, j]) <= 1e-8 * max(1.0, abs(fd))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.ones((2, 2)), np.ones((2, 3)))


class TestSadLoss:
    def test_zero_on_identical(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.1, 1.0, (6, 4))
        value, _ = sad_loss(x, x)
        assert value == pytest.approx(0.0, abs=1e-3)

    def test_orthogonal_columns(self):
        x = np.array([[1.0], [0.0]])
        x_hat = np.array([[0.0], [1.0]])
        value, _ = sad_loss(x, x_hat)
        assert value == pytest.approx(math.pi / 2, abs=1e-6)

    def test_scale_invariance(self):
        x = np.array([[1.0], [1.0]])
        value, _ = sad_loss(x, 2 * x)
        assert value == pytest.approx(0.0, abs=1e-3)
        rng = np.random.default_rng(3)
        a = rng.uniform(0.1, 1.0, (7, 5))
        b = rng.uniform(0.1, 1.0, (7, 5))
        v1, _ = sad_loss(a, b)
        v2, _ = sad_loss(a, b * rng.uniform(0.5, 3.0, size=5))
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.2, 1.0, (6, 4))
        x_hat = rng.uniform(0.2, 1.0, (6, 4))
        _, grad = sad_loss(x, x_hat)
        h = 1e-6
        for i in range(6):
            for j in range(4):
                xp = x_hat.copy(); xp[i, j] += h
                xm = x_hat.copy(); xm[i, j] -= h
                fd = (sad_loss(x, xp)[0] - sad_loss(x, xm)[0]) / (2 * h)
                assert abs(fd - grad[i, j]) <= 1e-6 * max(1.0, abs(fd), abs(grad[i, j]))

    def test_clamped_region_has_zero_gradient(self):
        x = np.array([[1.0], [0.0]])
        _, grad = sad_loss(x, x.copy())
        np.testing.assert_array_equal(grad, 0.0)

    def test_zero_column_rejected(self):
        x = np.array([[1.0], [1.0]])
        with pytest.raises(DegenerateSpectrumError):
            sad_loss(x, np.zeros((2, 1)))

    def test_mse_zero_implies_sad_zero(self):
        """Exact reconstruction is zero under both losses (the one-way link)."""
        rng = np.random.default_rng(5)
        x = rng.uniform(0.1, 1.0, (8, 6))
        mse_value, _ = mse_loss(x, x.copy())
        sad_value, _ = sad_loss(x, x.copy())
        assert mse_value == 0.0
        assert sad_value == pytest.approx(0.0, abs=1e-3)


class TestMatchEndmembers:
    def test_identity_on_equal(self):
        rng = np.random.default_rng(6)
        w = rng.uniform(0.1, 1.0, (10, 4))
        assert match_endmembers(w, w) == (0, 1, 2, 3)

    def test_swap_detected(self):
        rng = np.random.default_rng(7)
        w = rng.uniform(0.1, 1.0, (10, 3))
        swapped = w[:, [1, 0, 2]]
        assert match_endmembers(swapped, w) == (1, 0, 2)

    def test_matches_brute_force_enumeration(self):
        """Independent brute force over all 24 permutations."""
        rng = np.random.default_rng(8)
        w_hat = rng.uniform(0.1, 1.0, (12, 4))
        w_ref = rng.uniform(0.1, 1.0, (12, 4))

        def angle(u, v):
            c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
            return math.acos(max(-1.0, min(1.0, c)))

        best, best_cost = None, math.inf
        for perm in itertools.permutations(range(4)):
            cost = sum(angle(w_hat[:, perm[j]], w_ref[:, j]) for j in range(4))
            if cost < best_cost:
                best, best_cost = perm, cost
        assert match_endmembers(w_hat, w_ref) == best

    def test_zero_column_rejected(self):
        w = np.ones((5, 2))
        bad = w.copy()
        bad[:, 0] = 0.0
        with pytest.raises(DegenerateSpectrumError):
            match_endmembers(bad, w)

    def test_too_many_endmembers_rejected(self):
        w = np.random.default_rng(9).uniform(0.1, 1, (30, 11))
        with pytest.raises(ValueError):
            match_endmembers(w, w)


class TestAbundanceRmse:
    def test_zero_on_identical(self):
        a = np.random.default_rng(10).dirichlet(np.ones(3), size=6).T
        assert rmse_abundances(a, a, (0, 1, 2)) == 0.0

    def test_unit_vector_flip(self):
        a_ref = np.array([[1.0], [0.0]])
        a_hat = np.array([[0.0], [1.0]])
        assert rmse_abundances(a_ref, a_hat, (0, 1)) == pytest.approx(1.0)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(11)
        a_ref = rng.dirichlet(np.ones(3), size=50).T
        a_hat = rng.dirichlet(np.ones(3), size=50).T
        perm = (2, 0, 1)
        direct = math.sqrt(
            np.mean((a_ref - a_hat[list(perm), :]) ** 2)
        )
        assert rmse_abundances(a_ref, a_hat, perm) == pytest.approx(direct, abs=1e-12)

    def test_same_permutation_both_sides_is_invariant(self):
        rng = np.random.default_rng(12)
        a_ref = rng.dirichlet(np.ones(4), size=30).T
        a_hat = rng.dirichlet(np.ones(4), size=30).T
        base = rmse_abundances(a_ref, a_hat, (0, 1, 2, 3))
        shuffle = [2, 0, 3, 1]
        permuted = rmse_abundances(a_ref[shuffle, :], a_hat[shuffle, :], (0, 1, 2, 3))
        assert base == pytest.approx(permuted, abs=1e-12)

    def test_per_endmember_diagnostics(self):
        a_ref = np.array([[1.0, 1.0], [0.0, 0.0]])
        a_hat = np.array([[0.5, 0.5], [0.5, 0.5]])
        per = per_endmember_rmse(a_ref, a_hat, (0, 1))
        np.testing.assert_allclose(per, [0.5, 0.5])


class TestSadEndmembers:
    def test_zero_on_identical(self):
        w = np.random.default_rng(13).uniform(0.1, 1.0, (8, 3))
        assert sad_endmembers(w, w, (0, 1, 2)) == pytest.approx(0.0, abs=1e-7)

    def test_columnwise_scale_invariance(self):
        w = np.random.default_rng(14).uniform(0.1, 1.0, (8, 3))
        assert sad_endmembers(w, 2 * w, (0, 1, 2)) == pytest.approx(0.0, abs=1e-7)

    def test_half_orthogonal_pair(self):
        # first pair identical (angle 0), second orthogonal (angle pi/2)
        w_ref = np.array([[1.0, 1.0],
                          [0.0, 0.0]])
        w_hat = np.array([[1.0, 0.0],
                          [0.0, 1.0]])
        value = sad_endmembers(w_ref, w_hat, (0, 1))
        assert value == pytest.approx(math.pi / 4, abs=1e-12)


class TestAggregation:
    def _rec(self, a, e, diverged=False):
        return SimpleNamespace(abundance_rmse=a, endmember_sad=e, diverged=diverged)

    def test_mean_of_two(self):
        summary = aggregate_errors([self._rec(0.1, 0.3), self._rec(0.3, 0.1)])
        assert summary.abundance_mean == pytest.approx(0.2)
        assert summary.endmember_mean == pytest.approx(0.2)

    def test_single_record_zero_std(self):
        summary = aggregate_errors([self._rec(0.25, 0.4)])
        assert summary.abundance_mean == 0.25
        assert summary.abundance_std == 0.0
        assert summary.endmember_std == 0.0

    def test_diverged_records_skipped(self):
        summary = aggregate_errors(
            [self._rec(0.1, 0.1), self._rec(9.0, 9.0, diverged=True)]
        )
        assert summary.count == 1
        assert summary.abundance_mean == 0.1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_errors([])

    def test_summary_formatting(self):
        assert format_mean_std(0.0712, 0.104) == "0.07±0.1"

    def test_error_pair_validation(self):
        with pytest.raises(ValueError):
            ErrorPair(abundance_rmse=-0.1, endmember_sad=0.2)
        with pytest.raises(ValueError):
            ErrorPair(abundance_rmse=0.1, endmember_sad=4.0)


class TestUnmixingErrors:
    def test_recovers_permuted_solution(self):
        rng = np.random.default_rng(15)
        w = rng.uniform(0.1, 1.0, (10, 3))
        a = rng.dirichlet(np.ones(3), size=20).T
        perm = [2, 0, 1]
        pair, found = unmixing_errors(w, a, w[:, perm], a[perm, :])
        assert pair.abundance_rmse == pytest.approx(0.0, abs=1e-12)
        assert pair.endmember_sad == pytest.approx(0.0, abs=1e-7)
        # found[j] indexes the estimate column matching reference column j
        assert [perm[found[j]] for j in range(3)] == [0, 1, 2]
