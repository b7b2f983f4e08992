import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmm_nica.demix_net import DemixNet, identity_network
from hmm_nica.emission import (
    GaussianStateParams, NaturalParams, gaussian_to_natural, log_emission_matrix,
    m_step_gaussian, natural_to_gaussian, sufficient_stats,
)
from hmm_nica.hmm_core import DeadStateError
from oracles import naive_gaussian_logpdf


def one(mu, var):
    return GaussianStateParams(np.array([[mu]]), np.array([[var]]))


class TestNaturalParams:
    @pytest.mark.parametrize("mu,var,expected", [
        (0.0, 1.0, (0.0, -0.5)),
        (1.0, 0.5, (2.0, -1.0)),
        (-3.0, 4.0, (-0.75, -0.125)),
    ])
    def test_hand_values(self, mu, var, expected):
        np.testing.assert_allclose(gaussian_to_natural(one(mu, var)).eta[0, 0], expected,
                                   atol=1e-15)

    @pytest.mark.parametrize("eta,mu,var", [((0.0, -0.5), 0.0, 1.0), ((2.0, -1.0), 1.0, 0.5)])
    def test_inverse_hand_values(self, eta, mu, var):
        g = natural_to_gaussian(NaturalParams(np.array(eta).reshape(1, 1, 2)))
        assert g.means[0, 0] == pytest.approx(mu, abs=1e-15)
        assert g.variances[0, 0] == pytest.approx(var, abs=1e-15)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            GaussianStateParams(np.zeros((1, 2)), np.array([[1.0, 0.0]]))

    def test_nonnegative_second_parameter_rejected(self):
        with pytest.raises(ValueError):
            NaturalParams(np.array([[[1.0, 0.0]]]))

    def test_stacked_matches_sufficient_stats_layout(self):
        params = GaussianStateParams(np.array([[1.0, 2.0]]), np.array([[0.5, 4.0]]))
        stacked = gaussian_to_natural(params).stacked()
        np.testing.assert_allclose(stacked, [[2.0, -1.0, 0.5, -0.125]])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_round_trip(self, C, N, seed):
        r = np.random.default_rng(seed)
        p = GaussianStateParams(r.uniform(-10, 10, (C, N)), r.uniform(1e-3, 10, (C, N)))
        back = natural_to_gaussian(gaussian_to_natural(p))
        np.testing.assert_allclose(back.means, p.means, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(back.variances, p.variances, rtol=1e-12, atol=1e-12)


class TestSufficientStats:
    @pytest.mark.parametrize("s,expected", [
        ((0.0, 0.0), (0, 0, 0, 0)),
        ((1.0, -2.0), (1, 1, -2, 4)),
        ((0.5, 3.0), (0.5, 0.25, 3, 9)),
    ])
    def test_values(self, s, expected):
        np.testing.assert_array_equal(sufficient_stats(np.array(s)), expected)

    def test_batched(self):
        out = sufficient_stats(np.array([[1.0, -2.0], [0.5, 3.0]]))
        np.testing.assert_array_equal(out, [[1, 1, -2, 4], [0.5, 0.25, 3, 9]])


class TestLogEmission:
    def test_standard_normal_at_mean(self):
        out = log_emission_matrix(np.zeros((1, 1)), identity_network(1), one(0.0, 1.0))
        assert out[0, 0] == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
        assert out[0, 0] == pytest.approx(-0.9189385332, abs=1e-9)

    def test_density_maximized_at_mean(self):
        params = GaussianStateParams(np.array([[0.0, 0.0], [1.5, 0.0]]), np.ones((2, 2)))
        out = log_emission_matrix(np.zeros((1, 2)), identity_network(2), params)
        assert out[0, 0] > out[0, 1]

    def test_scaled_linear_net(self, rng):
        net = DemixNet([2.0 * np.eye(2)], [np.zeros(2)])
        params = GaussianStateParams(rng.normal(size=(3, 2)), rng.uniform(0.2, 2, (3, 2)))
        x = rng.normal(size=(5, 2))
        out = log_emission_matrix(x, net, params)
        for t in range(5):
            for c in range(3):
                expected = naive_gaussian_logpdf(2 * x[t], params.means[c], params.variances[c])
                assert out[t, c] == pytest.approx(expected + np.log(4.0), abs=1e-12)

    def test_identity_single_state_is_sum_of_univariates(self, rng):
        params = GaussianStateParams(rng.normal(size=(1, 4)), rng.uniform(0.1, 3, (1, 4)))
        x = rng.normal(size=(20, 4))
        out = log_emission_matrix(x, identity_network(4, L=2), params)
        expected = [naive_gaussian_logpdf(row, params.means[0], params.variances[0])
                    for row in np.maximum(x, 0.1 * x)]
        # L=2 identity applies one leaky-ReLU, so subtract its log-slope contribution
        logdet = np.log(0.1) * (x < 0).sum(axis=1)
        np.testing.assert_allclose(out[:, 0], np.array(expected) + logdet, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            log_emission_matrix(np.zeros((3, 2)), identity_network(3), one(0.0, 1.0))


class TestMStep:
    def test_single_state_unweighted(self, rng):
        s = rng.normal(size=(50, 3))
        out = m_step_gaussian(np.ones((50, 1)), s)
        np.testing.assert_allclose(out.means[0], s.mean(axis=0), atol=1e-13)
        np.testing.assert_allclose(out.variances[0], s.var(axis=0), atol=1e-13)

    def test_hard_partition(self, rng):
        s = rng.normal(size=(30, 2))
        labels = rng.integers(0, 3, 30)
        labels[:3] = [0, 1, 2]
        gamma = np.eye(3)[labels]
        out = m_step_gaussian(gamma, s)
        for k in range(3):
            np.testing.assert_allclose(out.means[k], s[labels == k].mean(axis=0), atol=1e-13)
            np.testing.assert_allclose(out.variances[k], s[labels == k].var(axis=0), atol=1e-13)

    def test_variance_floor(self):
        out = m_step_gaussian(np.ones((4, 1)), np.ones((4, 2)))
        np.testing.assert_array_equal(out.variances, 1e-8)

    def test_dead_state(self):
        gamma = np.column_stack([np.ones(5), np.zeros(5)])
        with pytest.raises(DeadStateError):
            m_step_gaussian(gamma, np.zeros((5, 1)))

    def test_moment_condition_small(self, rng):
        gamma = rng.dirichlet(np.ones(2), size=6)
        s = rng.normal(size=(6, 2))
        out = m_step_gaussian(gamma, s)
        for k in range(2):
            w = gamma[:, k] / gamma[:, k].sum()
            np.testing.assert_allclose(out.means[k], w @ s, atol=1e-10)
            np.testing.assert_allclose(out.means[k] ** 2 + out.variances[k], w @ (s * s),
                                       atol=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_moment_condition(self, T, N, C, seed):
        r = np.random.default_rng(seed)
        gamma = r.dirichlet(np.ones(C), size=T)
        s = r.normal(scale=3.0, size=(T, N))
        out = m_step_gaussian(gamma, s)
        w = gamma / gamma.sum(axis=0)
        model = np.stack([out.means, out.means ** 2 + out.variances], axis=-1)
        empirical = np.stack([w.T @ s, w.T @ (s * s)], axis=-1)
        # the floor can only bind for a degenerate (near zero variance) cluster
        free = out.variances > 1e-8
        np.testing.assert_allclose(model[free], empirical[free], atol=1e-10)

    def test_translation_equivariance(self, rng):
        x = rng.normal(size=(40, 3))
        shift = np.array([1.5, -2.0, 7.0])
        gamma = np.full((40, 2), 0.5)
        net = identity_network(3)
        a = m_step_gaussian(gamma, net(x))
        b = m_step_gaussian(gamma, net(x + shift))
        np.testing.assert_allclose(b.means, a.means + shift, atol=1e-12)
        np.testing.assert_allclose(b.variances, a.variances, atol=1e-12)
