"""Exact discrete-state HMM inference on a precomputed log-emission matrix.

Everything here is a pure function of numpy arrays. The forward-backward
recursion runs in the log domain: each step shifts by the running maximum
before exponentiating, so sequences of length 10^6 do not underflow.
"""
from dataclasses import dataclass

import numpy as np

STOCHASTIC_ATOL = 1e-12
RANK_TOL = 1e-8


class DeadStateError(ValueError):
    """A hidden state received zero posterior occupancy."""


@dataclass
class PosteriorSet:
    """Smoothed posteriors from the E-step.

    gamma[t, c] is q(c_t = c); xi[t, i, j] is q(c_t = i, c_{t+1} = j) so
    ``xi`` has T - 1 slices.
    """

    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float

    @property
    def T(self):
        return self.gamma.shape[0]

    @property
    def C(self):
        return self.gamma.shape[1]


def validate_transition(A, atol=STOCHASTIC_ATOL):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"transition matrix must be square C x C, got shape {A.shape}")
    if not np.all(np.isfinite(A)) or np.any(A < 0) or np.any(A > 1):
        raise ValueError("transition matrix entries must lie in [0, 1]")
    if np.max(np.abs(A.sum(axis=1) - 1.0)) > atol:
        raise ValueError("transition matrix rows must sum to 1")
    return A


def _check_inputs(log_emissions, A, pi):
    log_emissions = np.asarray(log_emissions, dtype=float)
    if log_emissions.ndim != 2 or log_emissions.shape[0] < 1:
        raise ValueError("log_emissions must be a T x C matrix with T >= 1")
    if np.any(np.isnan(log_emissions)):
        raise ValueError("log_emissions contains NaN")
    if np.any(np.isposinf(log_emissions)):
        raise ValueError("log_emissions contains +inf")
    A = validate_transition(A)
    pi = np.asarray(pi, dtype=float)
    C = log_emissions.shape[1]
    if A.shape[0] != C or pi.shape != (C,):
        raise ValueError(
            f"dimension mismatch: log_emissions has C={C}, A is {A.shape}, pi is {pi.shape}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise ValueError("pi must be a probability vector")
    return log_emissions, A, pi


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _forward_backward_batch(log_em, A, pi):
    """Batched recursion over B independent chains of equal length.

    ``log_em`` is B x T x C. Returns log-alpha, log-beta (both B x T x C) and
    the per-chain log-likelihood.
    """
    B, T, C = log_em.shape
    if B == 1:
        log_alpha, log_beta = _forward_backward_single(log_em[0], A, pi)
        log_alpha, log_beta = log_alpha[None], log_beta[None]
        if _shift_underflowed(log_alpha, log_em, log_beta):
            log_alpha, log_beta = _forward_backward_exact(log_em, A, pi)
    else:
        log_alpha = np.empty((B, T, C))
        log_beta = np.empty((B, T, C))
        exp, log, dot = np.exp, np.log, np.dot
        with np.errstate(divide="ignore"):
            a = log(pi)[None, :] + log_em[:, 0]
            log_alpha[:, 0] = a
            for t in range(1, T):
                m = a.max(axis=1)[:, None]
                a = log(dot(exp(a - m), A)) + m + log_em[:, t]
                log_alpha[:, t] = a
            AT = A.T
            b = np.zeros((B, C))
            log_beta[:, T - 1] = b
            for t in range(T - 2, -1, -1):
                v = log_em[:, t + 1] + b
                m = v.max(axis=1)[:, None]
                b = log(dot(exp(v - m), AT)) + m
                log_beta[:, t] = b
        if _shift_underflowed(log_alpha, log_em, log_beta):
            log_alpha, log_beta = _forward_backward_exact(log_em, A, pi)

    last = log_alpha[:, T - 1]
    m = np.max(last, axis=1)
    with np.errstate(invalid="ignore"):
        loglik = m + np.log(np.exp(last - m[:, None]).sum(axis=1))
    return log_alpha, log_beta, loglik


# exp() underflows to exactly zero below about -745
_UNDERFLOW = -700.0


def _shift_underflowed(log_alpha, log_em, log_beta):
    """True if a max-shifted step may have flushed a finite term to zero.

    The fast recursions share one shift across all states at a step; a state
    lying more than ~700 nats below the maximum then contributes exactly
    zero. That only happens for grossly misfit models, and in that case the
    exact per-target log-sum-exp recursion is used instead.
    """
    def gap(x):
        with np.errstate(invalid="ignore"):
            d = x - x.max(axis=-1, keepdims=True)
        return np.any(np.isfinite(d) & (d < _UNDERFLOW))
    return gap(log_alpha) or gap(log_em[:, 1:] + log_beta[:, 1:])


def _forward_backward_exact(log_em, A, pi):
    """Per-target log-sum-exp recursion; slower, immune to the shared-shift flush."""
    B, T, C = log_em.shape
    if B == 1:
        log_alpha, log_beta = _forward_backward_exact_single(log_em[0], A, pi)
        return log_alpha[None], log_beta[None]
    log_A = _log(A)
    log_alpha = np.empty((B, T, C))
    log_beta = np.empty((B, T, C))
    exp, log = np.exp, np.log
    with np.errstate(divide="ignore", invalid="ignore"):
        a = _log(pi)[None] + log_em[:, 0]
        log_alpha[:, 0] = a
        for t in range(1, T):
            M = a[:, :, None] + log_A[None]
            mx = M.max(axis=1)
            mx[~np.isfinite(mx)] = 0.0
            a = log(exp(M - mx[:, None, :]).sum(axis=1)) + mx + log_em[:, t]
            log_alpha[:, t] = a
        b = np.zeros((B, C))
        log_beta[:, T - 1] = b
        for t in range(T - 2, -1, -1):
            M = log_A[None] + (log_em[:, t + 1] + b)[:, None, :]
            mx = M.max(axis=2)
            mx[~np.isfinite(mx)] = 0.0
            b = log(exp(M - mx[:, :, None]).sum(axis=2)) + mx
            log_beta[:, t] = b
    return log_alpha, log_beta


def _forward_backward_exact_single(log_em, A, pi):
    T, C = log_em.shape
    log_A = _log(A)
    log_alpha = np.empty((T, C))
    log_beta = np.empty((T, C))
    exp, log = np.exp, np.log
    with np.errstate(divide="ignore", invalid="ignore"):
        a = _log(pi) + log_em[0]
        log_alpha[0] = a
        for t in range(1, T):
            M = a[:, None] + log_A
            mx = M.max(axis=0)
            mx[~np.isfinite(mx)] = 0.0
            a = log(exp(M - mx).sum(axis=0)) + mx + log_em[t]
            log_alpha[t] = a
        b = np.zeros(C)
        log_beta[T - 1] = b
        for t in range(T - 2, -1, -1):
            M = log_A + (log_em[t + 1] + b)
            mx = M.max(axis=1)
            mx[~np.isfinite(mx)] = 0.0
            b = log(exp(M - mx[:, None]).sum(axis=1)) + mx
            log_beta[t] = b
    return log_alpha, log_beta


def _forward_backward_single(log_em, A, pi):
    # Same recursion on 1-D rows: the per-step numpy overhead dominates for a
    # single long chain, and scalar reductions are markedly cheaper.
    T, C = log_em.shape
    log_alpha = np.empty((T, C))
    log_beta = np.empty((T, C))
    exp, log, dot = np.exp, np.log, np.dot
    with np.errstate(divide="ignore", invalid="ignore"):
        a = log(pi) + log_em[0]
        log_alpha[0] = a
        for t in range(1, T):
            m = a.max()
            a = log(dot(exp(a - m), A))
            a += m
            a += log_em[t]
            log_alpha[t] = a
        AT = A.T
        b = np.zeros(C)
        log_beta[T - 1] = b
        for t in range(T - 2, -1, -1):
            v = log_em[t + 1] + b
            m = v.max()
            b = log(dot(exp(v - m), AT))
            b += m
            log_beta[t] = b
    return log_alpha, log_beta


def _posteriors_from_messages(log_em, A, log_alpha, log_beta, loglik):
    log_gamma = log_alpha + log_beta - loglik[:, None, None]
    gamma = np.exp(log_gamma)
    gamma /= gamma.sum(axis=2, keepdims=True)

    B, T, C = log_em.shape
    if T == 1:
        return gamma, np.zeros((B, 0, C, C))
    # log xi_t(i, j) = log alpha_t(i) + log A_ij + log e_{t+1}(j) + log beta_{t+1}(j) - loglik;
    # every term is a log-probability, so exponentiating without a shift is safe
    with np.errstate(divide="ignore"):
        log_A = np.log(A)
    right = log_em[:, 1:] + log_beta[:, 1:] - loglik[:, None, None]
    xi = np.exp(log_alpha[:, :-1, :, None] + log_A[None, None] + right[:, :, None, :])
    xi /= xi.sum(axis=(2, 3), keepdims=True)
    return gamma, xi


def forward_backward(log_emissions, A, pi):
    """Smoothed marginals, pairwise posteriors and log-likelihood of one chain."""
    log_emissions, A, pi = _check_inputs(log_emissions, A, pi)
    post = forward_backward_batch(log_emissions[None], A, pi)
    return post[0]


def forward_backward_batch(log_emissions, A, pi):
    """Run forward-backward independently on a stack of equal-length chains.

    Parameters
    ----------
    log_emissions : ndarray (B, T, C)
    A : ndarray (C, C)
    pi : ndarray (C,)
        Initial distribution used for every chain.

    Returns
    -------
    list of PosteriorSet, one per chain.
    """
    log_emissions = np.asarray(log_emissions, dtype=float)
    if log_emissions.ndim != 3:
        raise ValueError("expected a B x T x C stack of log-emissions")
    if log_emissions.shape[0] < 1:
        raise ValueError("empty batch")
    _, A, pi = _check_inputs(log_emissions[0], A, pi)
    if np.any(np.isnan(log_emissions)) or np.any(np.isposinf(log_emissions)):
        raise ValueError("log_emissions contains NaN or +inf")
    log_alpha, log_beta, loglik = _forward_backward_batch(log_emissions, A, pi)
    if not np.all(np.isfinite(loglik)):
        raise FloatingPointError("sequence has zero probability under the model")
    gamma, xi = _posteriors_from_messages(log_emissions, A, log_alpha, log_beta, loglik)
    return [PosteriorSet(gamma[b], xi[b], float(loglik[b])) for b in range(len(loglik))]


def viterbi(log_emissions, A, pi):
    """Most probable state path; ties go to the lowest state index."""
    log_emissions, A, pi = _check_inputs(log_emissions, A, pi)
    T, C = log_emissions.shape
    log_A = _log(A)
    delta = _log(pi) + log_emissions[0]
    backptr = np.empty((T, C), dtype=np.intp)
    for t in range(1, T):
        scores = delta[:, None] + log_A
        # argmax returns the first maximum, i.e. the lowest predecessor index
        backptr[t] = np.argmax(scores, axis=0)
        delta = scores[backptr[t], np.arange(C)] + log_emissions[t]
    path = np.empty(T, dtype=np.intp)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = backptr[t, path[t]]
    return path


def stationary_distribution(A, tol=1e-12, max_iter=100_000):
    """Left eigenvector of A for eigenvalue 1, by power iteration on A^T.

    The iterate is multiplied by successive squares A, A^2, A^4, ... so
    strongly persistent chains (self-transition near 1) converge in a few
    dozen products; convergence is judged on the residual |pi A - pi|.
    """
    A = validate_transition(A)
    if not check_transition(A).irreducible:
        raise ValueError("transition matrix is reducible; stationary distribution is not unique")
    C = A.shape[0]
    pi = np.full(C, 1.0 / C)
    M = A.copy()
    for _ in range(max_iter):
        pi = pi @ M
        pi /= pi.sum()
        if np.max(np.abs(pi @ A - pi)) < tol:
            break
        M = M @ M
        M /= M.sum(axis=1, keepdims=True)
    else:
        raise RuntimeError("power iteration did not converge; chain may be periodic")
    for _ in range(3):
        pi = pi @ A
        pi /= pi.sum()
    return pi


def update_transition(posteriors):
    """Transition M-step from pairwise posteriors, rows renormalized.

    ``posteriors`` is a PosteriorSet or a list of them (independent chains,
    statistics pooled).
    """
    if isinstance(posteriors, PosteriorSet):
        posteriors = [posteriors]
    counts = sum(p.xi.sum(axis=0) for p in posteriors)
    occupancy = sum(p.gamma.sum(axis=0) for p in posteriors)
    return transition_from_counts(counts, occupancy)


def transition_from_counts(counts, occupancy):
    """A_ij = counts_ij / occupancy_i followed by row renormalization."""
    counts = np.asarray(counts, dtype=float)
    occupancy = np.asarray(occupancy, dtype=float)
    dead = np.flatnonzero(occupancy <= 0)
    if dead.size:
        raise DeadStateError(f"state(s) {dead.tolist()} have zero posterior occupancy")
    A = counts / occupancy[:, None]
    rowsum = A.sum(axis=1)
    dead = np.flatnonzero(rowsum <= 0)
    if dead.size:
        # only possible when a state is occupied solely at the final time step
        raise DeadStateError(f"state(s) {dead.tolist()} have no outgoing transition mass")
    return A / rowsum[:, None]


@dataclass
class TransitionReport:
    rank: int
    full_rank: bool
    singular_values: np.ndarray
    irreducible: bool
    unique_stationary: bool

    @property
    def ok(self):
        return self.full_rank and self.irreducible and self.unique_stationary


def check_transition(A):
    """Diagnostic report: rank, irreducibility and stationary uniqueness."""
    A = np.asarray(A, dtype=float)
    C = A.shape[0]
    sv = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL))

    adj = A > 0
    irreducible = True
    for start in range(C):
        seen = np.zeros(C, dtype=bool)
        seen[start] = True
        frontier = [start]
        while frontier:
            nxt = np.flatnonzero(adj[frontier].any(axis=0) & ~seen)
            seen[nxt] = True
            frontier = nxt.tolist()
        if not seen.all():
            irreducible = False
            break

    # A finite chain has a unique stationary distribution iff it has exactly
    # one closed communicating class; irreducible chains have exactly one.
    unique = irreducible or _single_closed_class(adj)
    return TransitionReport(rank, rank == C, sv, irreducible, unique)


def _single_closed_class(adj):
    C = adj.shape[0]
    reach = adj | np.eye(C, dtype=bool)
    for _ in range(C):
        reach = reach | ((reach.astype(int) @ reach.astype(int)) > 0)
    closed = []
    for i in range(C):
        cls = reach[i] & reach[:, i]
        if not np.any(reach[i] & ~cls):
            closed.append(tuple(np.flatnonzero(cls)))
    return len(set(closed)) == 1
