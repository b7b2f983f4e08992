"""Per-state factorial Gaussian source model and the observed-data emission density."""
from dataclasses import dataclass

import numpy as np

from .hmm_core import DeadStateError

VARIANCE_FLOOR = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianStateParams:
    """Source means and variances, both C x N."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise ValueError(
                f"means {self.means.shape} and variances {self.variances.shape} differ in shape")
        if np.any(~(self.variances > 0)):
            raise ValueError("variances must be strictly positive")

    @property
    def C(self):
        return self.means.shape[0]

    @property
    def N(self):
        return self.means.shape[1]

    def copy(self):
        return GaussianStateParams(self.means.copy(), self.variances.copy())


@dataclass
class NaturalParams:
    """eta[c, i] = (mu / var, -1 / (2 var)) for state c, component i."""

    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if self.eta.ndim != 3 or self.eta.shape[2] != 2:
            raise ValueError("natural parameters must have shape C x N x 2")
        if np.any(~(self.eta[..., 1] < 0)):
            raise ValueError("second natural parameter must be negative")

    def stacked(self):
        """C x 2N matrix with rows (eta_11, eta_12, eta_21, ...), matching sufficient_stats."""
        C, N, _ = self.eta.shape
        return self.eta.reshape(C, 2 * N)


def gaussian_to_natural(params):
    var = params.variances
    return NaturalParams(np.stack([params.means / var, -0.5 / var], axis=-1))


def natural_to_gaussian(nat):
    eta = nat.eta if isinstance(nat, NaturalParams) else NaturalParams(nat).eta
    var = -0.5 / eta[..., 1]
    return GaussianStateParams(eta[..., 0] * var, var)


def sufficient_stats(s):
    """Interleave (s_i, s_i^2) along the last axis; works on a vector or a T x N batch."""
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape[:-1] + (2 * s.shape[-1],))
    out[..., 0::2] = s
    out[..., 1::2] = s * s
    return out


def gaussian_log_density(s, params):
    """Sum over components of log N(s_i; mu_ci, var_ci), as a T x C matrix."""
    s = np.atleast_2d(s)
    diff = s[:, None, :] - params.means[None]
    quad = diff * diff / params.variances[None]
    return -0.5 * (quad.sum(axis=2) + np.log(params.variances).sum(axis=1)[None] + s.shape[1] * LOG_2PI)


def log_emission_matrix(x_seq, net, params):
    """T x C matrix of log p(x_t | c) under the demixing network and state params.

    The Jacobian term is evaluated once per time step and broadcast over states.
    """
    x_seq = np.atleast_2d(np.asarray(x_seq, dtype=float))
    if x_seq.shape[1] != net.N or params.N != net.N:
        raise ValueError(
            f"dimension mismatch: data N={x_seq.shape[1]}, net N={net.N}, params N={params.N}")
    trace = net.forward_batch(x_seq)
    s = trace.output
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("demixing network produced non-finite output")
    logdet = net.log_abs_det_batch(trace)
    return logdet[:, None] + gaussian_log_density(s, params)


def m_step_gaussian(gamma, s_seq, floor=VARIANCE_FLOOR):
    """Closed-form Gaussian update: gamma-weighted means and biased variances."""
    weights = np.asarray(gamma, dtype=float)
    s_seq = np.atleast_2d(np.asarray(s_seq, dtype=float))
    occupancy = weights.sum(axis=0)
    return gaussian_from_moments(occupancy, weights.T @ s_seq, weights.T @ (s_seq * s_seq), floor,
                                 gamma=weights, s_seq=s_seq)


def gaussian_from_moments(occupancy, first, second, floor=VARIANCE_FLOOR, gamma=None, s_seq=None):
    """Gaussian params from accumulated statistics sum_t gamma, sum_t gamma*s, sum_t gamma*s^2.

    When the raw ``gamma`` and ``s_seq`` are given the variance is computed
    from explicit residuals, which avoids cancellation in second - mean^2.
    """
    occupancy = np.asarray(occupancy, dtype=float)
    dead = np.flatnonzero(occupancy <= 0)
    if dead.size:
        raise DeadStateError(f"state(s) {dead.tolist()} have zero posterior occupancy")
    means = first / occupancy[:, None]
    if gamma is not None:
        var = np.empty_like(means)
        for k in range(means.shape[0]):
            resid = s_seq - means[k]
            var[k] = gamma[:, k] @ (resid * resid) / occupancy[k]
    else:
        var = second / occupancy[:, None] - means * means
    return GaussianStateParams(means, np.maximum(var, floor))
