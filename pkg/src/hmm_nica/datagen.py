"""Synthetic nonstationary data: circular-transition HMM, Gaussian sources, random leaky-ReLU mixing."""
from dataclasses import asdict, dataclass

import numpy as np

from .demix_net import DEFAULT_ALPHA, DemixNet
from .emission import GaussianStateParams
from .hmm_core import stationary_distribution, validate_transition
from .model import ModelParams


@dataclass
class DataConfig:
    """Generator settings. Defaults reproduce the large experimental instance."""

    num_components: int = 5
    num_states: int = 11
    length: int = 100_000
    mixing_layers: int = 1
    p_stay: float = 0.99
    alpha: float = DEFAULT_ALPHA
    cond_cap: float = 25.0
    mean_range: float = 4.0
    var_low: float = 0.1
    var_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_components < 1 or self.num_states < 1 or self.length < 1:
            raise ValueError("num_components, num_states and length must be positive")
        if self.mixing_layers < 1:
            raise ValueError("mixing_layers must be >= 1")
        if not 0 < self.var_low <= self.var_high:
            raise ValueError("need 0 < var_low <= var_high")


@dataclass
class DatasetBundle:
    observations: np.ndarray
    sources: np.ndarray
    state_path: np.ndarray
    mixing_net: DemixNet
    true_params: ModelParams
    config: DataConfig

    @property
    def seed(self):
        return self.config.seed


def make_circular_transition(C, p_stay):
    """Stay with probability p_stay, otherwise move to the next state in cyclic order."""
    if C < 2:
        raise ValueError("circular transition needs C >= 2")
    if not 0 < p_stay < 1:
        raise ValueError("p_stay must lie strictly between 0 and 1")
    A = np.zeros((C, C))
    idx = np.arange(C)
    A[idx, idx] = p_stay
    A[idx, (idx + 1) % C] += 1.0 - p_stay
    return A


def sample_states(A, pi, T, seed):
    A = validate_transition(A)
    pi = np.asarray(pi, dtype=float)
    rng = np.random.default_rng(seed)
    C = A.shape[0]
    cum = np.cumsum(A, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(T)
    path = np.empty(T, dtype=np.intp)
    c0 = np.cumsum(pi)
    c0[-1] = 1.0
    path[0] = min(int(np.searchsorted(c0, u[0], side="right")), C - 1)
    for t in range(1, T):
        path[t] = np.searchsorted(cum[path[t - 1]], u[t], side="right")
    return path


def sample_sources(path, params, seed):
    """s_t ~ N(mu_{c_t}, var_{c_t}) independently per component."""
    path = np.asarray(path)
    if path.size and (path.min() < 0 or path.max() >= params.C):
        raise ValueError("state path contains indices outside the parameter set")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((path.shape[0], params.N))
    return params.means[path] + np.sqrt(params.variances[path]) * z


def make_mixing_mlp(N, L, seed, cond_cap=25.0, alpha=DEFAULT_ALPHA, max_tries=10_000):
    """Random leaky-ReLU MLP with Gaussian weights, each resampled until cond < cond_cap."""
    if N < 1 or L < 1:
        raise ValueError("need N >= 1 and L >= 1")
    rng = np.random.default_rng(seed)
    weights = []
    for _ in range(L):
        for _ in range(max_tries):
            W = rng.standard_normal((N, N))
            if np.linalg.cond(W) < cond_cap:
                break
        else:
            raise RuntimeError(f"no weight matrix with condition number < {cond_cap} "
                               f"after {max_tries} draws")
        weights.append(W)
    return DemixNet(weights, [np.zeros(N) for _ in range(L)], alpha)


def exact_inverse(mixing):
    """Demixing MLP of the same architecture that inverts ``mixing`` exactly.

    The leaky ReLU satisfies phi^{-1}(z) = -(1/alpha) phi(-z), so each inverse
    activation is a regular activation wrapped in two sign/scale flips, and
    those flips fold into the neighbouring inverse affine maps.
    """
    L, a = mixing.L, mixing.alpha
    weights, biases = [], []
    for k in range(L):
        l = L - 1 - k
        W_inv = np.linalg.inv(mixing.weights[l])
        sign = -1.0 if k < L - 1 else 1.0
        # the previous demixing layer emitted phi(-v) = -alpha * v for the true value v
        scale = 1.0 if k == 0 else -1.0 / a
        weights.append(sign * scale * W_inv)
        biases.append(-sign * W_inv @ mixing.biases[l])
    return DemixNet(weights, biases, a)


def random_state_params(C, N, rng, mean_range=4.0, var_low=0.1, var_high=1.0):
    means = rng.uniform(-mean_range, mean_range, size=(C, N))
    variances = rng.uniform(var_low, var_high, size=(C, N))
    return GaussianStateParams(means, variances)


def generate_dataset(config=None, **overrides):
    config = config or DataConfig(**overrides)
    C, N = config.num_states, config.num_components
    # independent child streams so each piece is reproducible on its own
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    params = random_state_params(C, N, np.random.default_rng(seeds[0]), config.mean_range,
                                 config.var_low, config.var_high)
    A = make_circular_transition(C, config.p_stay) if C >= 2 else np.ones((1, 1))
    pi = stationary_distribution(A) if C >= 2 else np.ones(1)
    path = sample_states(A, pi, config.length, seeds[1])
    sources = sample_sources(path, params, seeds[2])
    mixing = make_mixing_mlp(N, config.mixing_layers, seeds[3], config.cond_cap, config.alpha)
    observations = mixing(sources)
    true_params = ModelParams(A, params, exact_inverse(mixing))
    return DatasetBundle(observations, sources, path, mixing, true_params, config)


def config_dict(config):
    return asdict(config)
