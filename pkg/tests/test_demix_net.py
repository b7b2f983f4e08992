import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from hmm_nica.demix_net import (
    AdamState, DemixNet, SingularNetworkError, adam_step, grad_lower_bound, identity_network,
    init_network, jacobian, log_abs_det_jacobian, lower_bound_terms,
)
from hmm_nica.emission import GaussianStateParams
from oracles import (
    central_difference, max_relative_error, min_abs_preactivation, naive_forward,
    naive_objective,
)


def random_net(rng, N, L, alpha=0.1):
    weights = [rng.normal(size=(N, N)) + 0.5 * np.eye(N) for _ in range(L)]
    return DemixNet(weights, [rng.normal(scale=0.3, size=N) for _ in range(L)], alpha)


def lu_logdet(J):
    lu, _ = scipy.linalg.lu_factor(J)
    return float(np.sum(np.log(np.abs(np.diag(lu)))))


def random_gradient_instance(rng, N, L, T, C):
    """Random net, batch, gamma and params with the batch kept away from activation kinks."""
    net = random_net(rng, N, L)
    rows = []
    while len(rows) < T:
        x = rng.normal(size=N)
        if min_abs_preactivation(net, x[None]) > 1e-2:
            rows.append(x)
    gamma = rng.dirichlet(np.ones(C), size=T)
    params = GaussianStateParams(rng.normal(size=(C, N)), rng.uniform(0.3, 2.0, (C, N)))
    return net, np.array(rows), gamma, params


def numeric_gradients(net, batch, gamma, params, include_logdet=True):
    numeric = []
    for p in net.parameters():
        # parameters() returns the live arrays, so perturbing p perturbs the net
        f = lambda: naive_objective(net, batch, gamma, params.means, params.variances,
                                    include_logdet)
        numeric.append(central_difference(f, p, h=1e-5))
    return numeric


class TestInit:
    def test_single_layer_orthogonal(self):
        net = init_network(2, 1, seed=3)
        assert abs(abs(np.linalg.det(net.weights[0])) - 1) < 1e-12
        np.testing.assert_array_equal(net.biases[0], 0.0)
        tr = net.forward(np.array([0.3, -0.2]))
        assert log_abs_det_jacobian(tr, net) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic(self):
        a, b = init_network(4, 3, seed=11), init_network(4, 3, seed=11)
        for Wa, Wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(Wa, Wb)

    def test_deep_all_orthogonal(self):
        net = init_network(5, 4, seed=0)
        assert net.L == 4
        for W in net.weights:
            np.testing.assert_allclose(W.T @ W, np.eye(5), atol=1e-10)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            init_network(0, 1, seed=0)
        with pytest.raises(ValueError):
            init_network(2, 0, seed=0)

    def test_rejects_nonpositive_alpha(self):
        with pytest.raises(ValueError):
            DemixNet([np.eye(2)], [np.zeros(2)], alpha=0.0)


class TestForward:
    def test_identity_positive(self):
        x = np.array([0.5, 2.0, 1.0])
        np.testing.assert_array_equal(identity_network(3, L=3).forward(x).output, x)

    def test_hand_trace_two_layers(self):
        tr = identity_network(2, L=2, alpha=0.1).forward(np.array([-1.0, 2.0]))
        np.testing.assert_allclose(tr.output, [-0.1, 2.0], atol=1e-15)
        np.testing.assert_array_equal(tr.slopes[0], [0.1, 1.0])

    def test_random_net_total(self, rng):
        net = random_net(rng, 4, 3)
        assert np.all(np.isfinite(net.forward(rng.normal(size=4)).output))

    def test_matches_naive(self, rng):
        net = random_net(rng, 3, 3)
        for x in rng.normal(size=(10, 3)):
            np.testing.assert_allclose(net(x), naive_forward(net.weights, net.biases, 0.1, x)[0],
                                       atol=1e-12)

    def test_slopes_in_allowed_set(self, rng):
        net = random_net(rng, 4, 4, alpha=0.2)
        tr = net.forward_batch(rng.normal(size=(50, 4)))
        for slope in tr.slopes:
            assert set(np.unique(slope)) <= {1.0, 0.2}

    def test_non_finite_input(self):
        with pytest.raises(ValueError):
            identity_network(2).forward(np.array([np.nan, 0.0]))

    def test_inverse_single_layer(self, rng):
        net = random_net(rng, 4, 1)
        x = rng.normal(size=(20, 4))
        np.testing.assert_allclose(net.inverse(net(x)), x, atol=1e-10)

    def test_inverse_deep(self, rng):
        net = random_net(rng, 3, 4)
        x = rng.normal(size=(20, 3))
        np.testing.assert_allclose(net.inverse(net(x)), x, atol=1e-8)


class TestJacobian:
    def test_single_layer_is_weight(self, rng):
        net = random_net(rng, 3, 1)
        np.testing.assert_array_equal(jacobian(net.forward(rng.normal(size=3)), net),
                                      net.weights[0])

    def test_hand_diagonal(self):
        net = identity_network(2, L=2, alpha=0.1)
        J = jacobian(net.forward(np.array([-1.0, 2.0])), net)
        np.testing.assert_allclose(J, np.diag([0.1, 1.0]))

    def test_finite_differences(self, rng):
        checked = 0
        while checked < 20:
            N, L = rng.integers(1, 4, endpoint=True), rng.integers(1, 3, endpoint=True)
            net = random_net(rng, N, L)
            x = rng.normal(size=N)
            if min_abs_preactivation(net, x[None]) <= 1e-2:
                continue
            fd = np.column_stack([(net(x + 1e-5 * e) - net(x - 1e-5 * e)) / 2e-5
                                  for e in np.eye(N)])
            J = jacobian(net.forward(x), net)
            assert max_relative_error(J, fd) < 1e-4
            checked += 1

    def test_batched_matches_single(self, rng):
        net = random_net(rng, 3, 3)
        X = rng.normal(size=(6, 3))
        Jb = jacobian(net.forward_batch(X), net)
        for t in range(6):
            np.testing.assert_allclose(Jb[t], jacobian(net.forward(X[t]), net), atol=1e-14)


class TestLogDet:
    def test_identity_zero(self):
        net = identity_network(3, L=2)
        assert log_abs_det_jacobian(net.forward(np.ones(3)), net) == 0.0

    def test_scaled_weight(self):
        net = DemixNet([2 * np.eye(2)], [np.zeros(2)])
        assert log_abs_det_jacobian(net.forward(np.ones(2)), net) == pytest.approx(np.log(4.0))

    def test_one_negative_hidden_unit(self):
        net = DemixNet([2 * np.eye(2), np.eye(2)], [np.zeros(2)] * 2, alpha=0.1)
        val = log_abs_det_jacobian(net.forward(np.array([-1.0, 1.0])), net)
        assert val == pytest.approx(np.log(4.0) + np.log(0.1), abs=1e-14)

    def test_matches_lu(self, rng):
        for _ in range(50):
            N, L = rng.integers(1, 10, endpoint=True), rng.integers(1, 4, endpoint=True)
            net = random_net(rng, N, L)
            tr = net.forward(rng.normal(size=N))
            assert abs(log_abs_det_jacobian(tr, net) - lu_logdet(jacobian(tr, net))) < 1e-8

    def test_singular_weight(self):
        net = DemixNet([np.array([[1.0, 2.0], [2.0, 4.0]])], [np.zeros(2)])
        with pytest.raises(SingularNetworkError):
            net.check_nonsingular()
        with pytest.raises(SingularNetworkError):
            log_abs_det_jacobian(net.forward(np.ones(2)), net)


class TestGradient:
    def test_finite_differences_small(self, rng):
        net, batch, gamma, params = random_gradient_instance(rng, 2, 2, 4, 2)
        analytic = grad_lower_bound(net, batch, gamma, params)
        for a, n in zip(analytic, numeric_gradients(net, batch, gamma, params)):
            assert max_relative_error(a, n) < 1e-4

    def test_finite_differences_without_logdet(self, rng):
        net, batch, gamma, params = random_gradient_instance(rng, 3, 2, 3, 2)
        analytic = grad_lower_bound(net, batch, gamma, params, include_logdet=False)
        numeric = numeric_gradients(net, batch, gamma, params, include_logdet=False)
        for a, n in zip(analytic, numeric):
            assert max_relative_error(a, n) < 1e-4

    def test_value_matches_naive(self, rng):
        net, batch, gamma, params = random_gradient_instance(rng, 3, 3, 4, 2)
        value, _ = lower_bound_terms(net, batch, gamma, params)
        assert value == pytest.approx(
            naive_objective(net, batch, gamma, params.means, params.variances), abs=1e-10)

    def test_mixture_collapse(self, rng):
        net, batch, _, _ = random_gradient_instance(rng, 2, 2, 5, 1)
        mu, var = rng.normal(size=(1, 2)), rng.uniform(0.5, 1.5, (1, 2))
        double = GaussianStateParams(np.vstack([mu, mu]), np.vstack([var, var]))
        g2 = grad_lower_bound(net, batch, np.full((5, 2), 0.5), double)
        g1 = grad_lower_bound(net, batch, np.ones((5, 1)), GaussianStateParams(mu, var))
        for a, b in zip(g2, g1):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_scale_linearity(self, rng):
        net, batch, gamma, params = random_gradient_instance(rng, 2, 2, 4, 2)
        g1 = grad_lower_bound(net, batch, gamma, params, scale=1.0)
        g2 = grad_lower_bound(net, batch, gamma, params, scale=2.0)
        for a, b in zip(g1, g2):
            np.testing.assert_array_equal(b, 2.0 * a)

    def test_batch_order_invariance(self, rng):
        net, batch, gamma, params = random_gradient_instance(rng, 3, 3, 8, 2)
        perm = rng.permutation(8)
        v1, g1 = lower_bound_terms(net, batch, gamma, params)
        v2, g2 = lower_bound_terms(net, batch[perm], gamma[perm], params)
        assert v1 == pytest.approx(v2, abs=1e-12)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rejects_nonpositive_scale(self, rng):
        net, batch, gamma, params = random_gradient_instance(rng, 2, 1, 2, 1)
        with pytest.raises(ValueError):
            grad_lower_bound(net, batch, gamma, params, scale=0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 2),
           st.integers(0, 2**32 - 1))
    def test_finite_differences_property(self, N, L, T, C, seed):
        r = np.random.default_rng(seed)
        net, batch, gamma, params = random_gradient_instance(r, N, L, T, C)
        analytic = grad_lower_bound(net, batch, gamma, params)
        for a, n in zip(analytic, numeric_gradients(net, batch, gamma, params)):
            assert max_relative_error(a, n) < 1e-4


class TestAdam:
    def test_zero_gradient(self, rng):
        net = random_net(rng, 2, 2)
        state = AdamState.zeros_like(net)
        state.first_moment = [np.ones_like(m) for m in state.first_moment]
        state.second_moment = [np.ones_like(v) for v in state.second_moment]
        state.step_count = 3
        zeros = [np.zeros_like(p) for p in net.parameters()]
        new, new_state = adam_step(net, zeros, state)
        # a zero gradient with nonzero momentum still moves; with zero momentum it must not
        np.testing.assert_allclose(new_state.first_moment[0], 0.9)
        np.testing.assert_allclose(new_state.second_moment[0], 0.999)
        fresh, _ = adam_step(net, zeros, AdamState.zeros_like(net))
        for a, b in zip(fresh.parameters(), net.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_single_step_hand_trace(self):
        net = DemixNet([np.eye(1)], [np.zeros(1)])
        grads = [np.array([[0.5]]), np.array([-2.0])]
        state = AdamState.zeros_like(net, lr=0.01)
        new, st_ = adam_step(net, grads, state)
        # m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        assert new.weights[0][0, 0] == pytest.approx(1.0 + 0.01 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        assert new.biases[0][0] == pytest.approx(-0.01 * 2.0 / (2.0 + 1e-8), abs=1e-15)
        assert st_.step_count == 1
        np.testing.assert_allclose(st_.first_moment[0], [[0.05]])
        np.testing.assert_allclose(st_.second_moment[1], [0.004])

    def test_two_step_hand_trace(self):
        net = DemixNet([np.eye(1)], [np.zeros(1)])
        state = AdamState.zeros_like(net, lr=0.1)
        g1 = [np.array([[1.0]]), np.array([0.0])]
        g2 = [np.array([[3.0]]), np.array([0.0])]
        net1, s1 = adam_step(net, g1, state)
        net2, s2 = adam_step(net1, g2, s1)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
        expected = net1.weights[0][0, 0] + 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert net2.weights[0][0, 0] == pytest.approx(expected, abs=1e-14)
        assert s2.step_count == 2

    def test_deterministic_and_pure(self, rng):
        net = random_net(rng, 2, 2)
        grads = [rng.normal(size=p.shape) for p in net.parameters()]
        state = AdamState.zeros_like(net)
        before = [p.copy() for p in net.parameters()]
        a, sa = adam_step(net, grads, state)
        b, sb = adam_step(net, grads, state)
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(x, y)
        for x, y in zip(net.parameters(), before):
            np.testing.assert_array_equal(x, y)
        assert state.step_count == 0

    def test_ascent_direction(self):
        net = DemixNet([np.eye(2)], [np.zeros(2)])
        grads = [np.ones((2, 2)), np.ones(2)]
        new, _ = adam_step(net, grads, AdamState.zeros_like(net))
        assert np.all(new.weights[0] > net.weights[0])

    def test_shape_mismatch(self):
        net = DemixNet([np.eye(2)], [np.zeros(2)])
        with pytest.raises(ValueError):
            adam_step(net, [np.ones((3, 3)), np.ones(2)], AdamState.zeros_like(net))
