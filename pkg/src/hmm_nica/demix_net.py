"""Square leaky-ReLU MLP used as the demixing function g, with hand-written gradients.

The network maps x -> W_L phi(... phi(W_1 x + b_1) ...) + b_L, phi being a
leaky ReLU of slope ``alpha``. Every layer is N x N, so the Jacobian is
square and

    log|det J g(x)| = sum_l log|det W_l| + sum_{hidden units} log slope.

The slope term is piecewise constant in the parameters, so its gradient is
zero almost everywhere and the only log-det gradient is ``W_l^{-T}`` per
sample for each layer.
"""
from dataclasses import dataclass

import numpy as np

from .emission import GaussianStateParams, gaussian_log_density

DEFAULT_ALPHA = 0.1
SINGULAR_DET = 1e-12


class SingularNetworkError(FloatingPointError):
    """A weight matrix became (numerically) singular."""


@dataclass
class ForwardTrace:
    """Cached forward pass. Arrays carry a leading batch axis for batched traces."""

    input: np.ndarray
    pre_activations: list
    output: np.ndarray
    slopes: list


@dataclass
class DemixNet:
    weights: list
    biases: list
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix and at least one layer")
        N = self.weights[0].shape[0]
        for W, b in zip(self.weights, self.biases):
            if W.shape != (N, N) or b.shape != (N,):
                raise ValueError("all layers must be square N x N with length-N biases")
        if not self.alpha > 0:
            raise ValueError("leaky-ReLU slope alpha must be positive for bijectivity")

    @property
    def N(self):
        return self.weights[0].shape[0]

    @property
    def L(self):
        return len(self.weights)

    def parameters(self):
        """Flat list [W_1, b_1, ..., W_L, b_L]."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_parameters(cls, params, alpha):
        return cls(list(params[0::2]), list(params[1::2]), alpha)

    def copy(self):
        return DemixNet([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.alpha)

    def check_nonsingular(self):
        for l, W in enumerate(self.weights):
            sign, logabs = np.linalg.slogdet(W)
            if sign == 0 or logabs < np.log(SINGULAR_DET):
                raise SingularNetworkError(f"weight matrix of layer {l} is singular (|det| < 1e-12)")

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.N,):
            raise ValueError(f"expected input of length {self.N}, got shape {x.shape}")
        tr = self.forward_batch(x[None])
        return ForwardTrace(tr.input[0], [p[0] for p in tr.pre_activations], tr.output[0],
                            [s[0] for s in tr.slopes])

    def forward_batch(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.N:
            raise ValueError(f"expected a T x {self.N} batch, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite network input")
        pre, slopes = [], []
        h = X
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            pre.append(z)
            if l < self.L - 1:
                slope = np.where(z > 0, 1.0, self.alpha)
                slopes.append(slope)
                h = z * slope
            else:
                h = z
        return ForwardTrace(X, pre, h, slopes)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.forward(X).output
        return self.forward_batch(X).output

    def inverse(self, Y):
        """Exact inverse map, layer by layer (each layer is affine then leaky-ReLU)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        h = Y
        for l in range(self.L - 1, -1, -1):
            if l < self.L - 1:
                h = np.where(h > 0, h, h / self.alpha)
            h = np.linalg.solve(self.weights[l], (h - self.biases[l]).T).T
        return h

    def log_abs_det_weights(self):
        total = 0.0
        for W in self.weights:
            sign, logabs = np.linalg.slogdet(W)
            if sign == 0:
                raise SingularNetworkError("singular weight matrix")
            total += logabs
        return total

    def log_abs_det_batch(self, trace):
        """Per-sample log|det J| for a batched trace."""
        T = trace.output.shape[0]
        logdet = np.full(T, self.log_abs_det_weights())
        log_alpha = np.log(self.alpha)
        for slope in trace.slopes:
            logdet += log_alpha * np.count_nonzero(slope != 1.0, axis=1)
        return logdet


def init_network(N, L, seed, alpha=DEFAULT_ALPHA):
    """Random orthogonal weights (sign-fixed QR of a Gaussian matrix), zero biases."""
    if N < 1 or L < 1:
        raise ValueError("need N >= 1 and L >= 1")
    rng = np.random.default_rng(seed)
    weights = []
    for _ in range(L):
        Q, R = np.linalg.qr(rng.standard_normal((N, N)))
        weights.append(Q * np.sign(np.diag(R))[None, :])
    return DemixNet(weights, [np.zeros(N) for _ in range(L)], alpha)


def identity_network(N, L=1, alpha=DEFAULT_ALPHA):
    return DemixNet([np.eye(N) for _ in range(L)], [np.zeros(N) for _ in range(L)], alpha)


def jacobian(trace, net):
    """J = W_L D_{L-1} W_{L-1} ... D_1 W_1, for a single-sample or batched trace."""
    if trace.output.ndim == 1:
        J = net.weights[0]
        for l in range(1, net.L):
            J = net.weights[l] @ (trace.slopes[l - 1][:, None] * J)
        return J.copy()
    T = trace.output.shape[0]
    J = np.broadcast_to(net.weights[0], (T, net.N, net.N))
    for l in range(1, net.L):
        J = np.einsum("ij,tjk->tik", net.weights[l], trace.slopes[l - 1][:, :, None] * J)
    return np.array(J)


def log_abs_det_jacobian(trace, net):
    """sum_l log|det W_l| + sum of log slopes over hidden units."""
    if trace.output.ndim == 1:
        batched = ForwardTrace(trace.input[None], [p[None] for p in trace.pre_activations],
                               trace.output[None], [s[None] for s in trace.slopes])
        return float(net.log_abs_det_batch(batched)[0])
    return net.log_abs_det_batch(trace)


def kink_gradient(z, alpha, bandwidth):
    """Smoothed derivative of log(alpha) * [z < 0] with respect to z, per unit.

    The slope part of log|det J| jumps by log(alpha) when a pre-activation
    crosses zero, so its pointwise gradient is zero yet the expected value
    over data changes as the kink moves. Replacing the step by a logistic of
    width ``bandwidth * std(z)`` gives a kernel estimate of that surface term.
    """
    tau = bandwidth * np.maximum(z.std(axis=0), 1e-12)
    u = np.clip(-z / tau, -60.0, 60.0)
    sig = 1.0 / (1.0 + np.exp(-u))
    return -np.log(alpha) / tau * sig * (1.0 - sig)


def lower_bound_terms(net, batch, gamma, params, include_logdet=True, kink_bandwidth=None):
    """Objective sum_t [log|J g(x_t)| + sum_c gamma_tc log p_S(g(x_t) | c)] and its gradients.

    Returns ``(value, grads)`` with ``grads`` aligned to ``net.parameters()``.
    Scaling is left to the caller. With ``kink_bandwidth`` set, the gradient
    also carries the smoothed kink term of ``kink_gradient``; the returned
    value is always the exact objective.
    """
    batch = np.atleast_2d(batch)
    gamma = np.atleast_2d(gamma)
    trace = net.forward_batch(batch)
    s = trace.output
    T = s.shape[0]

    value = float(np.sum(gamma * gaussian_log_density(s, params)))
    if include_logdet:
        value += float(np.sum(net.log_abs_det_batch(trace)))

    prec = 1.0 / params.variances
    # d/ds sum_c gamma_c log N(s; mu_c, var_c) = sum_c gamma_c (mu_c - s) / var_c
    delta = gamma @ (params.means * prec) - s * (gamma @ prec)

    grads_W = [None] * net.L
    grads_b = [None] * net.L
    for l in range(net.L - 1, -1, -1):
        if l > 0:
            h_prev = trace.pre_activations[l - 1] * trace.slopes[l - 1]
        else:
            h_prev = trace.input
        grads_W[l] = delta.T @ h_prev
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * trace.slopes[l - 1]
            if include_logdet and kink_bandwidth is not None:
                delta = delta + kink_gradient(trace.pre_activations[l - 1], net.alpha,
                                              kink_bandwidth)

    if include_logdet:
        for l, W in enumerate(net.weights):
            try:
                grads_W[l] = grads_W[l] + T * np.linalg.inv(W).T
            except np.linalg.LinAlgError as exc:
                raise SingularNetworkError(f"weight matrix of layer {l} is singular") from exc

    grads = []
    for gW, gb in zip(grads_W, grads_b):
        grads += [gW, gb]
    return value, grads


def grad_lower_bound(net, batch, gamma, params, scale=1.0, include_logdet=True):
    """Gradient of ``scale`` times the emission part of the EM lower bound."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    if not isinstance(params, GaussianStateParams):
        raise TypeError("params must be GaussianStateParams")
    _, grads = lower_bound_terms(net, batch, gamma, params, include_logdet)
    return [scale * g for g in grads]


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = net.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)

    def copy(self):
        return AdamState([m.copy() for m in self.first_moment],
                         [v.copy() for v in self.second_moment],
                         self.step_count, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(net, grads, state):
    """One bias-corrected Adam step in the ascent direction. Inputs are not mutated."""
    params = net.parameters()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match network parameters")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p + state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_net = DemixNet.from_parameters(new_p, net.alpha)
    return new_net, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
