"""EM estimation of the hidden Markov nonlinear ICA model.

One EM iteration is: exact E-step by forward-backward, exact transition
update, exact Gaussian update, then a few Adam ascent steps on the demixing
network with the posteriors held fixed. The initial-state distribution is
always the stationary distribution of the current transition matrix.

Training runs on internally whitened data. The whitening map is folded into
the first network layer before parameters are returned, so callers always
see a network acting on raw observations and likelihoods of the raw data.
"""
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .demix_net import (AdamState, DemixNet, SingularNetworkError, adam_step, init_network,
                        lower_bound_terms)
from .emission import GaussianStateParams, gaussian_from_moments, log_emission_matrix
from .hmm_core import (DeadStateError, PosteriorSet, forward_backward, forward_backward_batch,
                       stationary_distribution, transition_from_counts)
from .model import ModelParams

logger = logging.getLogger(__name__)

RECOVERABLE = (DeadStateError, SingularNetworkError, FloatingPointError, np.linalg.LinAlgError)


class TrainingError(RuntimeError):
    """Every restart failed."""


class IdentifiabilityError(ValueError):
    """Configuration violates the state-count assumption C >= 2N + 1."""


@dataclass
class TrainConfig:
    num_states: int = 11
    num_components: int = 5
    layers: int = 1
    em_iterations: int = 200
    grad_steps: int = 5
    lr: float = 1e-3
    tol: float = 1e-6
    tol_window: int = 5
    restarts: int = 5
    mode: str = "full"
    subchain_length: int = 100
    minibatch_size: int = 64
    buffer_length: int = 10
    seed: int = 0
    alpha: float = 0.1
    check_identifiability: bool = True
    reset_adam: bool = False
    whiten: bool = True
    init_mean_range: float = 4.0
    init_var_low: float = 0.5
    init_var_high: float = 1.5
    init_p_stay: float = 0.9
    init_means: str = "data"
    init_window: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kink_bandwidth: float = None
    monotone_net: bool = False
    max_backtracks: int = 8

    def __post_init__(self):
        for name in ("num_states", "num_components", "layers", "restarts", "subchain_length",
                     "minibatch_size", "tol_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("em_iterations", "grad_steps", "buffer_length"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mode not in ("full", "subchain"):
            raise ValueError(f"mode must be 'full' or 'subchain', got {self.mode!r}")
        if self.check_identifiability and self.num_states < 2 * self.num_components + 1:
            raise IdentifiabilityError(
                f"C = {self.num_states} < 2N + 1 = {2 * self.num_components + 1}: "
                "identifiability assumption (ii) requires C >= NV + 1 with V = 2")
        if self.init_means not in ("data", "uniform"):
            raise ValueError("init_means must be 'data' or 'uniform'")
        if not 0 < self.init_p_stay < 1:
            raise ValueError("init_p_stay must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class TraceRecord:
    iteration: int
    free_energy: float
    loglik: float
    grad_norm: float
    seconds: float


@dataclass
class TrainingTrace:
    records: list = field(default_factory=list)
    restart: int = 0
    converged: bool = False

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])


@dataclass
class TrainResult:
    params: ModelParams
    trace: TrainingTrace
    adam: AdamState
    iterations: int
    restart_log: list
    final_loglik: float

    def __iter__(self):
        # allows ``params, trace = train_full(...)``
        return iter((self.params, self.trace))


# ---------------------------------------------------------------------------
# E-step and free energy


def _pi(A):
    return np.ones(1) if A.shape[0] == 1 else stationary_distribution(A)


def e_step(data, params, log_em=None):
    """Exact posteriors for the whole sequence under ``params``."""
    if log_em is None:
        log_em = log_emission_matrix(data, params.net, params.sources)
    return forward_backward(log_em, params.A, _pi(params.A))


def _xlogy(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x * np.log(y)
    return np.where(x > 0, out, 0.0)


def free_energy(data, params, q, log_em=None):
    """E_q[log p(c, x)] + H(q) for a chain-structured q given by its gamma and xi."""
    if log_em is None:
        log_em = log_emission_matrix(data, params.net, params.sources)
    gamma, xi = q.gamma, q.xi
    pi = _pi(params.A)
    expected = (_xlogy(gamma[0], pi).sum() + _xlogy(xi, params.A[None]).sum()
                + float(np.sum(gamma * log_em)))
    T = gamma.shape[0]
    if T == 1:
        entropy = -_xlogy(gamma[0], gamma[0]).sum()
    else:
        entropy = -_xlogy(xi, xi).sum() + _xlogy(gamma[1:-1], gamma[1:-1]).sum()
    return float(expected + entropy)


def transition_objective(A, counts, first_gamma):
    """Terms of the free energy that depend on A: sum xi log A + gamma_1 log pi(A)."""
    return float(_xlogy(counts, A).sum() + _xlogy(first_gamma, _pi(A)).sum())


def update_transition_monotone(A_old, counts, occupancy, first_gamma):
    """Transition M-step with a backtracking guard on the initial-state term.

    The closed-form update maximizes sum xi log A only; because pi is tied to
    A, the full free energy can dip slightly. If it does, step back towards
    A_old along the segment until the A-dependent terms do not decrease.
    """
    A_new = transition_from_counts(counts, occupancy)
    base = transition_objective(A_old, counts, first_gamma)
    tau = 1.0
    for _ in range(40):
        cand = A_old + tau * (A_new - A_old)
        cand /= cand.sum(axis=1, keepdims=True)
        try:
            if transition_objective(cand, counts, first_gamma) >= base:
                return cand
        except (ValueError, RuntimeError):
            pass
        tau *= 0.5
    return A_old.copy()


# ---------------------------------------------------------------------------
# whitening and initialization


@dataclass
class Whitening:
    """z = P (x - mean); identity when disabled."""

    P: np.ndarray
    mean: np.ndarray

    @classmethod
    def fit(cls, data, scale=1.0, enabled=True):
        N = data.shape[1]
        if not enabled:
            return cls(np.eye(N), np.zeros(N))
        mean = data.mean(axis=0)
        cov = np.cov(data, rowvar=False, bias=True).reshape(N, N)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.maximum(evals, 1e-12 * evals.max())
        P = scale * (evecs / np.sqrt(evals)) @ evecs.T
        return cls(P, mean)

    def apply(self, data):
        return (data - self.mean) @ self.P.T

    @property
    def log_abs_det(self):
        return float(np.linalg.slogdet(self.P)[1])

    def fold(self, net):
        """Network on raw x equivalent to ``net`` applied to whitened x."""
        out = net.copy()
        W1 = net.weights[0]
        out.weights[0] = W1 @ self.P
        out.biases[0] = net.biases[0] - W1 @ self.P @ self.mean
        return out

    def unfold(self, net):
        """Inverse of ``fold``."""
        out = net.copy()
        W1 = net.weights[0]
        out.weights[0] = np.linalg.solve(self.P.T, W1.T).T
        out.biases[0] = net.biases[0] + W1 @ self.mean
        return out


def _whitening_scale(config):
    # match the spread of the initial source model: uniform means plus mean variance
    return np.sqrt(config.init_mean_range ** 2 / 3.0 + 0.5 * (config.init_var_low + config.init_var_high))


def initial_transition(C, p_stay):
    """p_stay on the diagonal, the rest spread evenly over the other states."""
    if C == 1:
        return np.ones((1, 1))
    A = np.full((C, C), (1.0 - p_stay) / (C - 1))
    np.fill_diagonal(A, p_stay)
    return A


def window_kmeans_means(s, C, rng, window=10, iters=30):
    """k-means++ then Lloyd iterations on non-overlapping window averages of ``s``.

    Averaging over a few consecutive steps exploits state persistence: window
    means scatter far less than single points around their state's mean.
    """
    T = s.shape[0]
    w = max(1, min(window, T // C))
    pts = s[: T // w * w].reshape(-1, w, s.shape[1]).mean(axis=1)
    centers, _ = kmeans2(pts, C, iter=iters, minit="++", seed=rng)
    return centers


def init_params(config, seed, z=None):
    """Random initial parameters.

    With ``init_means='data'`` and data ``z`` available, the state means come
    from a randomly seeded k-means on short-window averages of the initial
    network's outputs; otherwise they are uniform on
    [-init_mean_range, init_mean_range].
    """
    rng = np.random.default_rng(seed)
    C, N = config.num_states, config.num_components
    means = rng.uniform(-config.init_mean_range, config.init_mean_range, size=(C, N))
    variances = rng.uniform(config.init_var_low, config.init_var_high, size=(C, N))
    net = init_network(N, config.layers, rng.integers(2**63), alpha=config.alpha)
    if config.init_means == "data" and z is not None:
        means = window_kmeans_means(net(z), C, rng, config.init_window)
    return ModelParams(initial_transition(C, config.init_p_stay),
                       GaussianStateParams(means, variances), net)


def _new_adam(net, config):
    return AdamState.zeros_like(net, config.lr, config.adam_beta1, config.adam_beta2,
                                config.adam_eps)


def _grad_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def _network_steps(params, adam, x, gamma, config, scale=1.0):
    """Up to ``grad_steps`` Adam ascent steps on the network with gamma fixed.

    With ``monotone_net`` a step is kept only if the exact objective (slope
    terms included) does not decrease; otherwise it is halved towards the
    current network, and the M-step ends after ``max_backtracks`` failures.
    """
    grad_norm = 0.0
    net = params.net
    value, grads = lower_bound_terms(net, x, gamma, params.sources,
                                     kink_bandwidth=config.kink_bandwidth)
    for _ in range(config.grad_steps):
        grads = [scale * g for g in grads]
        grad_norm = _grad_norm(grads)
        cand, adam = adam_step(net, grads, adam)
        cand.check_nonsingular()
        new_value, new_grads = lower_bound_terms(cand, x, gamma, params.sources,
                                                 kink_bandwidth=config.kink_bandwidth)
        if config.monotone_net:
            tries = 0
            while new_value < value and tries < config.max_backtracks:
                cand = DemixNet.from_parameters(
                    [0.5 * (a + b) for a, b in zip(net.parameters(), cand.parameters())],
                    net.alpha)
                new_value, new_grads = lower_bound_terms(cand, x, gamma, params.sources,
                                                         kink_bandwidth=config.kink_bandwidth)
                tries += 1
            if new_value < value:
                break
        net, value, grads = cand, new_value, new_grads
    params.net = net
    return adam, grad_norm


def _converged(values, config):
    w = config.tol_window
    if len(values) <= w:
        return False
    old, new = values[-1 - w], values[-1]
    return abs(new - old) <= config.tol * max(abs(new), 1e-300)


# ---------------------------------------------------------------------------
# full-batch EM


def _prepare(data, config):
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != config.num_components:
        raise ValueError(f"data must be T x {config.num_components}, got shape {data.shape}")
    if data.shape[0] < config.num_states:
        raise ValueError("need at least C observations")
    white = Whitening.fit(data, _whitening_scale(config), config.whiten)
    return data, white, white.apply(data)


def _start(config, white, seed, init, adam, z):
    if init is None:
        params = init_params(config, seed, z)
    else:
        params = init.copy()
        params.net = white.unfold(params.net)
    params.net.check_nonsingular()
    if adam is None or config.reset_adam:
        adam = _new_adam(params.net, config)
    else:
        adam = adam.copy()
        adam.lr = config.lr
    return params, adam


def _full_em_run(z, config, params, adam, logdet_shift, start_iteration=0):
    trace = TrainingTrace()
    t0 = time.perf_counter()
    fe_history = []
    for it in range(start_iteration, start_iteration + config.em_iterations):
        log_em = log_emission_matrix(z, params.net, params.sources)
        post = forward_backward(log_em, params.A, _pi(params.A))
        fe = free_energy(None, params, post, log_em)
        fe_history.append(fe)

        if _converged(fe_history, config):
            trace.converged = True
            trace.append(TraceRecord(it, fe + logdet_shift, post.log_likelihood + logdet_shift,
                                     0.0, time.perf_counter() - t0))
            break

        counts = post.xi.sum(axis=0)
        occupancy = post.gamma.sum(axis=0)
        if params.C > 1:
            params.A = update_transition_monotone(params.A, counts, occupancy, post.gamma[0])
        s = params.net(z)
        params.sources = gaussian_from_moments(occupancy, post.gamma.T @ s, None,
                                               gamma=post.gamma, s_seq=s)
        if config.reset_adam:
            adam = _new_adam(params.net, config)
        adam, gnorm = _network_steps(params, adam, z, post.gamma, config)
        trace.append(TraceRecord(it, fe + logdet_shift, post.log_likelihood + logdet_shift,
                                 gnorm, time.perf_counter() - t0))
    return params, adam, trace


def _restarts(data, config, run, init=None, adam=None):
    data, white, z = _prepare(data, config)
    shift = data.shape[0] * white.log_abs_det
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best, log = None, []
    n_restarts = 1 if init is not None else config.restarts
    for r in range(n_restarts):
        try:
            params, opt = _start(config, white, seeds[r], init, adam, z)
            params, opt, trace = run(z, config, params, opt, shift)
            # final exact likelihood at the returned parameters
            final = e_step(z, params).log_likelihood + shift
        except RECOVERABLE as exc:
            logger.warning("restart %d failed: %s", r, exc)
            log.append({"restart": r, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            continue
        trace.restart = r
        log.append({"restart": r, "status": "ok", "loglik": final, "iterations": len(trace)})
        logger.info("restart %d: final log-likelihood %.6f after %d iterations", r, final, len(trace))
        if best is None or final > best[0]:
            best = (final, params, opt, trace)
    if best is None:
        raise TrainingError("all restarts failed: " + "; ".join(e["error"] for e in log))
    final, params, opt, trace = best
    params.net = white.fold(params.net)
    return TrainResult(params, trace, opt, len(trace), log, final)


def starting_networks(data, config):
    """The untrained network of every restart, as maps on raw observations."""
    data, white, z = _prepare(data, config)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    return [white.fold(init_params(config, s, z).net) for s in seeds]


def train_full(data, config, init=None, adam=None, start_iteration=0):
    """Full-batch EM with random restarts; returns the best run by final log-likelihood.

    ``init`` (and optionally ``adam``) resume from given parameters, in which
    case a single run is made.
    """
    def run(z, cfg, params, opt, shift):
        return _full_em_run(z, cfg, params, opt, shift, start_iteration)
    return _restarts(data, config, run, init, adam)


# ---------------------------------------------------------------------------
# subchain stochastic EM


@dataclass
class Subchain:
    """Core span [start, stop) plus the buffered window [lo, hi) used for inference."""

    start: int
    stop: int
    lo: int
    hi: int


def make_subchains(T, length, buffer=0):
    if not 1 <= length <= T:
        raise ValueError("subchain length must lie in [1, T]")
    chains = []
    for start in range(0, T, length):
        stop = min(start + length, T)
        chains.append(Subchain(start, stop, max(0, start - buffer), min(T, stop + buffer)))
    return chains


def subchain_posteriors(log_em, chains, A, pi):
    """Forward-backward on each buffered window; returns the core-span PosteriorSets.

    Windows of equal length are batched. Pairwise posteriors are kept only for
    transitions with both ends inside the core span.
    """
    out = [None] * len(chains)
    groups = {}
    for k, ch in enumerate(chains):
        groups.setdefault(ch.hi - ch.lo, []).append(k)
    for _, members in sorted(groups.items()):
        stack = np.stack([log_em[chains[k].lo:chains[k].hi] for k in members])
        posts = forward_backward_batch(stack, A, pi)
        for k, post in zip(members, posts):
            ch = chains[k]
            a, b = ch.start - ch.lo, ch.stop - ch.lo
            out[k] = PosteriorSet(post.gamma[a:b], post.xi[a:b - 1], post.log_likelihood)
    return out


@dataclass
class SufficientStats:
    counts: np.ndarray
    occupancy: np.ndarray
    first: np.ndarray
    second: np.ndarray
    first_gamma: np.ndarray

    @classmethod
    def zeros(cls, C, N):
        return cls(np.zeros((C, C)), np.zeros(C), np.zeros((C, N)), np.zeros((C, N)), np.zeros(C))

    def add(self, post, s, weight=1.0, is_first=False):
        self.counts += weight * post.xi.sum(axis=0)
        self.occupancy += weight * post.gamma.sum(axis=0)
        self.first += weight * (post.gamma.T @ s)
        self.second += weight * (post.gamma.T @ (s * s))
        if is_first:
            self.first_gamma += post.gamma[0]


def subchain_statistics(data, params, chains):
    """Accumulate E-step sufficient statistics over ``chains`` with the current parameters."""
    log_em = _window_log_emissions(data, params, chains)
    posts = subchain_posteriors(log_em, chains, params.A, _pi(params.A))
    stats = SufficientStats.zeros(params.C, params.N)
    for ch, post in zip(chains, posts):
        stats.add(post, params.net(data[ch.start:ch.stop]), is_first=ch.start == 0)
    return stats, posts


def _window_log_emissions(data, params, chains):
    # only the rows touched by these windows are evaluated
    T = data.shape[0]
    mask = np.zeros(T, dtype=bool)
    for ch in chains:
        mask[ch.lo:ch.hi] = True
    log_em = np.zeros((T, params.C))
    log_em[mask] = log_emission_matrix(data[mask], params.net, params.sources)
    return log_em


def _stochastic_em_run(z, config, params, adam, logdet_shift, rng, start_iteration=0):
    T = z.shape[0]
    chains = make_subchains(T, config.subchain_length, config.buffer_length)
    trace = TrainingTrace()
    t0 = time.perf_counter()
    fe_history = []
    for epoch in range(start_iteration, start_iteration + config.em_iterations):
        log_em = log_emission_matrix(z, params.net, params.sources)
        post = forward_backward(log_em, params.A, _pi(params.A))
        fe = free_energy(None, params, post, log_em)
        fe_history.append(fe)
        if _converged(fe_history, config):
            trace.converged = True
            trace.append(TraceRecord(epoch, fe + logdet_shift, post.log_likelihood + logdet_shift,
                                     0.0, time.perf_counter() - t0))
            break

        stats = SufficientStats.zeros(params.C, params.N)
        order = rng.permutation(len(chains))
        gnorm = 0.0
        for b in range(0, len(order), config.minibatch_size):
            batch = [chains[k] for k in order[b:b + config.minibatch_size]]
            log_em_b = _window_log_emissions(z, params, batch)
            posts = subchain_posteriors(log_em_b, batch, params.A, _pi(params.A))
            idx = np.concatenate([np.arange(ch.start, ch.stop) for ch in batch])
            gamma = np.concatenate([p.gamma for p in posts])
            x = z[idx]
            s = params.net(x)
            offset = 0
            for ch, p in zip(batch, posts):
                n = ch.stop - ch.start
                stats.add(p, s[offset:offset + n], is_first=ch.start == 0)
                offset += n
            scale = T / len(idx)
            adam, gnorm = _network_steps(params, adam, x, gamma, config, scale)

        if params.C > 1:
            params.A = update_transition_monotone(params.A, stats.counts, stats.occupancy,
                                                  stats.first_gamma)
        params.sources = gaussian_from_moments(stats.occupancy, stats.first, stats.second)
        trace.append(TraceRecord(epoch, fe + logdet_shift, post.log_likelihood + logdet_shift,
                                 gnorm, time.perf_counter() - t0))
    return params, adam, trace


def train_stochastic(data, config, init=None, adam=None, start_iteration=0):
    """Subchain stochastic EM; each trace record is one epoch over all subchains.

    Network gradients from a minibatch are scaled by T / (number of core
    observations in the minibatch). Transition and Gaussian parameters are
    updated once per epoch from statistics accumulated over the epoch.
    """
    if config.subchain_length > np.asarray(data).shape[0]:
        raise ValueError("subchain_length exceeds the sequence length")
    rngs = iter(np.random.default_rng(s) for s in
                np.random.SeedSequence([config.seed, 1]).spawn(config.restarts))

    def run(z, cfg, params, opt, shift):
        return _stochastic_em_run(z, cfg, params, opt, shift, next(rngs), start_iteration)
    return _restarts(data, config, run, init, adam)


def train(data, config, **kwargs):
    if config.mode == "subchain":
        return train_stochastic(data, config, **kwargs)
    return train_full(data, config, **kwargs)
