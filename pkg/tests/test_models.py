import math

import numpy as np
import pytest

from cotrack.gm import GaussianMixture
from cotrack.models import (
    AgentDynamics,
    PtBelief,
    RangeBearingModel,
    TargetDynamics,
    agent_predict,
    cv_process_noise,
    cv_transition,
    linearize_range_bearing,
    range_bearing,
    target_predict,
    wrap_angle,
)

from conftest import random_spd

R2 = np.diag([10.0, 1e-4])


def make_target_dynamics(p_survival=0.99, p_birth=0.25):
    birth = GaussianMixture(
        np.log([p_birth]), [[0.0, 0.0, 0.0, 0.0]], [np.diag([1600.0, 1600.0, 16.0, 16.0])]
    )
    return TargetDynamics(
        cv_transition(1.0), cv_process_noise(1.0, 0.5), p_survival, p_birth, birth
    )


class TestAgentPredict:
    def test_identity_dynamics(self, rng):
        gm = GaussianMixture(
            rng.normal(size=3), rng.normal(size=(3, 4)), np.stack([random_spd(rng, 4) for _ in range(3)])
        )
        dyn = AgentDynamics(np.eye(4), np.zeros((4, 4)))
        out = agent_predict(gm, dyn)
        assert np.allclose(out.means, gm.means)
        assert np.allclose(out.covs, gm.covs)
        assert np.allclose(out.log_w, gm.log_w)

    def test_constant_velocity_mean(self):
        gm = GaussianMixture([0.0], [[0.0, 0.0, 1.0, 1.0]], [np.eye(4)])
        out = agent_predict(gm, AgentDynamics(cv_transition(1.0), np.eye(4) * 1e-9))
        assert np.allclose(out.means[0], [1.0, 1.0, 1.0, 1.0])

    def test_weight_sum_preserved(self, rng):
        gm = GaussianMixture(
            np.log([0.4, 0.6]), rng.normal(size=(2, 4)), np.stack([np.eye(4)] * 2)
        )
        out = agent_predict(gm, AgentDynamics(cv_transition(1.0), cv_process_noise(1.0, 0.1)))
        assert out.total_weight == pytest.approx(gm.total_weight, rel=1e-12)


class TestTargetPredict:
    def test_full_survival_no_nonexistence(self):
        dyn = make_target_dynamics(p_survival=1.0, p_birth=0.25)
        prior = PtBelief(GaussianMixture([0.0], [np.zeros(4)], [np.eye(4)]), 0.0)
        out = target_predict(prior, dyn)
        assert out.nonexist_mass == pytest.approx(0.0, abs=1e-12)

    def test_from_nonexistent(self):
        dyn = make_target_dynamics()
        out = target_predict(PtBelief.nonexistent(4), dyn)
        assert out.existence == pytest.approx(0.25, rel=1e-12)
        assert out.nonexist_mass == pytest.approx(0.75, rel=1e-12)
        assert len(out.exist_gm) == len(dyn.birth_gm)

    def test_plug_in_nonexistence(self):
        dyn = make_target_dynamics(p_survival=0.99, p_birth=0.25)
        prior = PtBelief(
            GaussianMixture([math.log(0.5)], [np.zeros(4)], [np.eye(4)]), 0.5
        )
        out = target_predict(prior, dyn)
        assert out.nonexist_mass == pytest.approx(0.38, rel=1e-12)

    def test_conserves_probability(self, rng):
        dyn = make_target_dynamics()
        for _ in range(10):
            p_e = rng.uniform(0, 1)
            prior = PtBelief(
                GaussianMixture(
                    [math.log(p_e) if p_e > 0 else -np.inf], [rng.normal(size=4)], [np.eye(4)]
                ),
                1.0 - p_e,
            )
            out = target_predict(prior, dyn)
            assert out.total_mass == pytest.approx(1.0, abs=1e-9)


class TestRangeBearing:
    def test_three_four_five(self):
        r, th = range_bearing([0.0, 0.0], [3.0, 4.0])
        assert r == pytest.approx(5.0)
        assert th == pytest.approx(math.atan2(4, 3))

    def test_east(self):
        r, th = range_bearing([0.0, 0.0], [1.0, 0.0])
        assert (r, th) == (1.0, 0.0)

    def test_north(self):
        r, th = range_bearing([0.0, 0.0], [0.0, 1.0])
        assert r == 1.0 and th == pytest.approx(math.pi / 2)

    def test_coincident_rejected(self):
        with pytest.raises(ValueError):
            range_bearing([1.0, 2.0], [1.0, 2.0])

    def test_wrap_half_open_interval(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_angle(0.3) == pytest.approx(0.3)


def finite_difference_jacobian(obs_state, src_state, eps=1e-5):
    def h(o, s):
        return np.array(range_bearing(o[:2], s[:2]))

    G = np.zeros((2, 4))
    E = np.zeros((2, 4))
    for i in range(4):
        d = np.zeros(4)
        d[i] = eps
        G[:, i] = (h(obs_state + d, src_state) - h(obs_state - d, src_state)) / (2 * eps)
        E[:, i] = (h(obs_state, src_state + d) - h(obs_state, src_state - d)) / (2 * eps)
    return G, E


class TestLinearization:
    def test_jacobian_matches_finite_differences(self, rng):
        for _ in range(25):
            obs = rng.uniform(-500, 500, size=4)
            src = rng.uniform(-500, 500, size=4)
            if np.hypot(*(src[:2] - obs[:2])) < 20:
                continue
            lin = linearize_range_bearing(obs, src, R2)
            G_fd, E_fd = finite_difference_jacobian(obs, src)
            assert np.allclose(lin.G, G_fd, atol=1e-5)
            assert np.allclose(lin.E, E_fd, atol=1e-5)

    def test_target_due_east(self):
        lin = linearize_range_bearing(np.zeros(4), np.array([100.0, 0, 0, 0]), R2)
        assert lin.E[1, 0] == pytest.approx(0.0, abs=1e-12)
        assert lin.E[1, 1] == pytest.approx(1.0 / 100.0)

    def test_position_blocks_antisymmetric(self, rng):
        obs = rng.uniform(0, 100, size=4)
        src = obs + np.array([50.0, 80.0, 0, 0])
        lin = linearize_range_bearing(obs, src, R2)
        assert np.allclose(lin.G[:, :2], -lin.E[:, :2])
        assert np.allclose(lin.G[:, 2:], 0)

    def test_residual_second_order(self, rng):
        obs = np.array([0.0, 0.0, 0, 0])
        src = np.array([300.0, 200.0, 0, 0])
        lin = linearize_range_bearing(obs, src, R2)
        h0 = np.array(range_bearing(obs[:2], src[:2]))
        prev = None
        for scale in (1.0, 0.5, 0.25, 0.125):
            dy = scale * np.array([5.0, -3.0, 0, 0])
            dx = scale * np.array([-2.0, 4.0, 0, 0])
            h = np.array(range_bearing(obs[:2] + dy[:2], src[:2] + dx[:2]))
            approx = h0 + lin.G @ dy + lin.E @ dx
            err = np.linalg.norm(h - approx)
            if prev is not None:
                assert err < prev / 3.0  # quadratic shrink (factor 4 nominal)
            prev = err

    def test_correct_wraps_only_angular_difference(self):
        # Geometry where |E @ src| far exceeds pi (short range, large
        # coordinates): the corrected measurement must stay consistent with
        # the linear model G y + E x without any spurious 2 pi shift; wrapping
        # the downstream residual here is exactly the historical bug.
        obs = np.array([1430.0, 1050.0, 0, 0])
        src = np.array([1400.0, 1400.0, 0, 0])
        lin = linearize_range_bearing(obs, src, R2)
        assert abs(lin.E @ src)[1] > math.pi  # the regression precondition
        r, th = range_bearing(obs[:2], src[:2])
        z = np.array([r + 0.5, wrap_angle(th + 0.02)])
        zc = lin.correct(z)
        pred = lin.G @ obs + lin.E @ src
        assert zc[0] - pred[0] == pytest.approx(0.5, abs=1e-9)
        assert zc[1] - pred[1] == pytest.approx(0.02, abs=1e-9)

    def test_coincident_points_rejected(self):
        with pytest.raises(ValueError):
            linearize_range_bearing(np.zeros(4), np.zeros(4), R2)


class TestRangeBearingModel:
    def test_clutter_densities(self):
        m = RangeBearingModel(R2, 0.95, 25.0, (0, 1500, 0, 1500), 1000.0)
        assert m.clutter_density_cartesian == pytest.approx(1.0 / 1500**2)
        assert m.f_fa == pytest.approx(1.0 / (1000.0 * 2 * math.pi))

    def test_validation(self):
        with pytest.raises(ValueError):
            RangeBearingModel(R2, 1.5, 25.0, (0, 1500, 0, 1500), 1000.0)
        with pytest.raises(ValueError):
            RangeBearingModel(R2, 0.5, 25.0, (0, 0, 0, 1500), 1000.0)


class TestBirthMassInvariant:
    def test_birth_mass_must_match(self):
        birth = GaussianMixture(np.log([0.2]), [np.zeros(4)], [np.eye(4)])
        with pytest.raises(ValueError):
            TargetDynamics(cv_transition(1.0), cv_process_noise(1.0, 0.5), 0.99, 0.25, birth)
