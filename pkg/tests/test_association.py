import math

import numpy as np
import pytest

from cotrack.association import (
    compute_beta_gm,
    enumerate_association_marginals,
    inner_bp,
)
from cotrack.gm import GaussianMixture
from cotrack.models import LinearizedObservation


def scalar_obs(var_z=1.0):
    """One-dimensional linear observation: z = y + x + n."""
    return LinearizedObservation(
        G=[[1.0]], E=[[1.0]], h_point=[0.0], lin_point=[0.0], R=[[var_z]]
    )


def unit_gm(mean, var=1.0, weight=1.0):
    return GaussianMixture([math.log(weight) if weight != 1 else 0.0], [[mean]], [[[var]]])


class TestBeta:
    def test_missed_detection_weight(self):
        beta = compute_beta_gm(
            unit_gm(0.0), unit_gm(0.0), scalar_obs(), np.zeros((0, 1)), 0.95, 25.0, 0.01
        )
        assert beta[0] == pytest.approx(0.05)

    def test_nonexistent_target(self):
        empty = GaussianMixture.empty(1)
        beta = compute_beta_gm(
            unit_gm(0.0), empty, scalar_obs(), np.array([[0.3]]), 0.95, 25.0, 0.01
        )
        assert beta[0] == 1.0
        assert beta[1] == 0.0

    def test_scalar_hand_oracle(self):
        # theta = N(1, 2), delta = N(3, 4), z = y + x + n with var 0.5:
        # innovation N(z; 4, 6.5) scaled by P_D/(lambda f_fa).
        theta = unit_gm(1.0, 2.0)
        delta = unit_gm(3.0, 4.0)
        z = np.array([[5.0]])
        p_detect, lam, f_fa = 0.9, 10.0, 0.02
        beta = compute_beta_gm(theta, delta, scalar_obs(0.5), z, p_detect, lam, f_fa)
        var = 0.5 + 2.0 + 4.0
        expected = (
            p_detect
            * math.exp(-0.5 * (5.0 - 4.0) ** 2 / var)
            / math.sqrt(2 * math.pi * var)
            / (lam * f_fa)
        )
        assert beta[1] == pytest.approx(expected, rel=1e-12)
        assert beta[0] == pytest.approx(1 - 0.9)

    def test_zero_clutter_density_rejected(self):
        with pytest.raises(ValueError):
            compute_beta_gm(
                unit_gm(0.0), unit_gm(0.0), scalar_obs(), np.array([[1.0]]), 0.9, 10.0, 0.0
            )

    def test_mixture_weights_enter(self):
        # halving the delta mass halves beta(m) and moves beta(0)
        theta = unit_gm(0.0)
        full = unit_gm(0.0, weight=1.0)
        half = unit_gm(0.0, weight=0.5)
        z = np.array([[0.5]])
        b_full = compute_beta_gm(theta, full, scalar_obs(), z, 0.9, 10.0, 0.02)
        b_half = compute_beta_gm(theta, half, scalar_obs(), z, 0.9, 10.0, 0.02)
        assert b_half[1] == pytest.approx(b_full[1] / 2, rel=1e-12)
        assert b_half[0] == pytest.approx(1 - 0.45)


class TestInnerBp:
    def test_no_measurements(self):
        table = inner_bp(np.array([[0.4], [0.9]]))
        assert np.allclose(table.eta, [[1.0], [1.0]])

    def test_single_target_single_measurement_exact(self):
        beta = np.array([[0.3, 0.7]])
        table = inner_bp(beta, tol=1e-14)
        assert table.eta[0, 0] == pytest.approx(0.3)
        assert table.eta[0, 1] == pytest.approx(0.7)

    def test_two_targets_one_measurement_tree_exact(self):
        beta = np.ones((2, 2))
        table = inner_bp(beta, tol=1e-14)
        expected = enumerate_association_marginals(beta)
        assert np.allclose(table.eta, expected, atol=1e-10)
        assert np.allclose(expected[0], [2 / 3, 1 / 3])

    def test_rows_are_probability_vectors(self, rng):
        for _ in range(30):
            K = int(rng.integers(1, 5))
            M = int(rng.integers(0, 5))
            beta = rng.uniform(0.01, 2.0, size=(K, M + 1))
            table = inner_bp(beta)
            assert np.all(table.eta >= 0)
            assert np.allclose(table.eta.sum(axis=1), 1.0, atol=1e-12)

    def test_tree_cases_match_enumeration(self, rng):
        for _ in range(40):
            if rng.random() < 0.5:
                K, M = 1, int(rng.integers(1, 4))
            else:
                K, M = int(rng.integers(2, 4)), 1
            beta = rng.uniform(0.05, 3.0, size=(K, M + 1))
            table = inner_bp(beta, max_iters=500, tol=1e-15)
            expected = enumerate_association_marginals(beta)
            assert np.allclose(table.eta, expected, atol=1e-10)

    def test_loopy_reaches_fixed_point(self, rng):
        for _ in range(20):
            K = int(rng.integers(2, 5))
            M = int(rng.integers(2, 5))
            beta = rng.uniform(0.05, 3.0, size=(K, M + 1))
            table = inner_bp(beta, max_iters=200, tol=1e-10)
            assert table.converged
            assert table.iterations <= 200

    def test_unobserved_rows_stay_on_miss(self):
        beta = np.array([[1.0, 0.0, 0.0], [0.5, 1.0, 0.2]])
        table = inner_bp(beta)
        assert table.eta[0, 0] == pytest.approx(1.0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            inner_bp(np.array([[1.0, -0.1]]))
