"""Component matching, recovery metrics and identifiability-assumption checks."""
import time
from dataclasses import dataclass, field

import numpy as np

from .demix_net import SingularNetworkError, grad_lower_bound, init_network
from .emission import GaussianStateParams, gaussian_to_natural
from .hmm_core import check_transition

LAMBDA_DET_TOL = 1e-10
MEAN_GAP_TOL = 1e-6


@dataclass
class AssignmentResult:
    permutation: np.ndarray
    total_cost: float


def _assignment_cost(cost):
    """Optimal assignment cost via shortest augmenting paths with potentials, O(K^3)."""
    K = cost.shape[0]
    INF = np.inf
    u = np.zeros(K + 1)
    v = np.zeros(K + 1)
    p = np.zeros(K + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(K + 1, dtype=int)
    for i in range(1, K + 1):
        p[0] = i
        j0 = 0
        minv = np.full(K + 1, INF)
        used = np.zeros(K + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, K + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(K + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(K, dtype=int)
    for j in range(1, K + 1):
        perm[p[j] - 1] = j - 1
    return perm


def _perm_cost(cost, perm):
    total = 0.0
    for i, j in enumerate(perm):
        total += cost[i, j]
    return total


def hungarian(cost):
    """Minimum-cost perfect matching of rows to columns.

    ``permutation[i]`` is the column assigned to row i. Among optimal
    assignments the lexicographically smallest permutation is returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    K = cost.shape[0]
    if K == 0:
        return AssignmentResult(np.zeros(0, dtype=int), 0.0)
    best = _perm_cost(cost, _assignment_cost(cost))
    tol = 1e-12 * max(1.0, np.abs(cost).max() * K)

    # greedy lexicographic fixing: keep the smallest column that still allows an optimum
    perm = np.empty(K, dtype=int)
    free_cols = list(range(K))
    fixed = 0.0
    for i in range(K):
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            if rest_cols:
                sub = cost[np.ix_(range(i + 1, K), rest_cols)]
                rest = _perm_cost(sub, _assignment_cost(sub))
            else:
                rest = 0.0
            if fixed + cost[i, j] + rest <= best + tol:
                perm[i] = j
                fixed += cost[i, j]
                free_cols.remove(j)
                break
    return AssignmentResult(perm, _perm_cost(cost, perm))


def correlation_matrix(a, b):
    """Pearson correlation between every column of ``a`` and every column of ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    sa = np.sqrt((a * a).sum(axis=0))
    sb = np.sqrt((b * b).sum(axis=0))
    if np.any(sa == 0) or np.any(sb == 0):
        raise ValueError("zero-variance column; correlation undefined")
    return (a.T @ b) / np.outer(sa, sb)


def mcc_detail(s_true, s_est):
    """Returns (mean |rho|, matched |rho| per true component, assignment)."""
    s_true = np.asarray(s_true, dtype=float)
    s_est = np.asarray(s_est, dtype=float)
    if s_true.shape != s_est.shape:
        raise ValueError(f"shape mismatch: {s_true.shape} vs {s_est.shape}")
    rho = np.abs(correlation_matrix(s_true, s_est))
    assign = hungarian(1.0 - rho)
    matched = rho[np.arange(rho.shape[0]), assign.permutation]
    return float(matched.mean()), matched, assign


def mcc(s_true, s_est):
    """Mean absolute correlation over optimally matched component pairs."""
    return mcc_detail(s_true, s_est)[0]


def state_accuracy(true_path, est_path, C):
    """Fraction of time steps correct after the best relabeling of ``est_path``."""
    true_path = np.asarray(true_path, dtype=int)
    est_path = np.asarray(est_path, dtype=int)
    if true_path.shape != est_path.shape:
        raise ValueError("paths must have equal length")
    K = max(C, int(true_path.max(initial=0)) + 1, int(est_path.max(initial=0)) + 1)
    counts = np.zeros((K, K))
    np.add.at(counts, (true_path, est_path), 1.0)
    assign = hungarian(-counts)
    matched = counts[np.arange(K), assign.permutation].sum()
    return float(matched / len(true_path))


def linear_r2(s_true, s_est):
    """R^2 of regressing each true component on all estimated components plus intercept."""
    X = np.column_stack([np.ones(len(s_est)), s_est])
    coef, *_ = np.linalg.lstsq(X, s_true, rcond=None)
    resid = s_true - X @ coef
    ss_tot = ((s_true - s_true.mean(axis=0)) ** 2).sum(axis=0)
    return 1.0 - (resid ** 2).sum(axis=0) / ss_tot


@dataclass
class AssumptionReport:
    full_rank: bool
    irreducible: bool
    unique_stationary: bool
    enough_states: bool
    lambda_invertible: bool
    lambda_condition: float
    lambda_det: float
    distinct_means: bool
    min_mean_gap: float
    bijective: bool = True
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return (self.full_rank and self.irreducible and self.unique_stationary
                and self.enough_states and self.lambda_invertible and self.distinct_means
                and self.bijective)

    def lines(self):
        def mark(ok):
            return "ok  " if ok else "FAIL"
        out = [
            f"[{mark(self.full_rank)}] (i) transition matrix full rank",
            f"[{mark(self.irreducible)}] (i) transition matrix irreducible",
            f"[{mark(self.unique_stationary)}] (i) unique stationary distribution",
            f"[{mark(self.enough_states)}] (ii) C >= 2N + 1",
            f"[{mark(self.lambda_invertible)}] (iii) natural-parameter difference matrix invertible "
            f"(|det| = {self.lambda_det:.3g}, cond = {self.lambda_condition:.3g})",
            f"[{mark(self.distinct_means)}] distinct state means per component "
            f"(min gap = {self.min_mean_gap:.3g})",
            f"[{mark(self.bijective)}] (v) mixing/demixing map bijective",
        ]
        return out + [f"note: {n}" for n in self.notes]


def lambda_tilde(sources, pivot=0):
    """Rows (lambda_c - lambda_pivot) for the first 2N non-pivot states, rows scaled to unit norm."""
    nat = gaussian_to_natural(sources).stacked()
    others = [c for c in range(nat.shape[0]) if c != pivot][: nat.shape[1]]
    M = nat[others] - nat[pivot]
    norms = np.linalg.norm(M, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        M = np.where(norms[:, None] > 0, M / norms[:, None], 0.0)
    return M


def check_assumptions(params, N=None, C=None):
    """Numerical checks of the identifiability assumptions for Gaussian sources.

    ``params`` needs ``A`` and ``sources``; a ``net`` attribute, if not None,
    is checked for nonsingular layers and a positive activation slope.
    """
    sources = params.sources
    N = sources.N if N is None else N
    C = sources.C if C is None else C
    notes = []
    tr = check_transition(params.A)
    enough = C >= 2 * N + 1

    if sources.C >= 2 * N + 1:
        M = lambda_tilde(sources)
        det = float(abs(np.linalg.det(M)))
        cond = float(np.linalg.cond(M)) if det > 0 else np.inf
        lam_ok = det > LAMBDA_DET_TOL
    else:
        det, cond, lam_ok = 0.0, np.inf, False
        notes.append("too few states to form the square natural-parameter difference matrix")

    gaps = []
    for i in range(sources.N):
        m = np.sort(sources.means[:, i])
        gaps.append(np.min(np.diff(m)) if len(m) > 1 else np.inf)
    min_gap = float(np.min(gaps))

    bijective = True
    net = getattr(params, "net", None)
    if net is not None:
        try:
            net.check_nonsingular()
        except SingularNetworkError as exc:
            bijective = False
            notes.append(str(exc))
        bijective = bijective and net.alpha > 0
    return AssumptionReport(tr.full_rank, tr.irreducible, tr.unique_stationary, enough, lam_ok,
                            cond, det, min_gap > MEAN_GAP_TOL, min_gap, bijective, notes)


@dataclass
class BenchmarkRow:
    N: int
    with_logdet_ms: float
    with_logdet_std_ms: float
    without_logdet_ms: float
    without_logdet_std_ms: float

    @property
    def ratio(self):
        return self.with_logdet_ms / self.without_logdet_ms


def benchmark_logdet(N_values, L=4, repetitions=20, batch_size=1, num_states=None, seed=0):
    """Time grad_lower_bound with and without the log-determinant term for each N.

    Both variants are timed in alternation on the same inputs so slow drifts in
    machine load affect them equally. Medians are reported as the central
    value; standard deviations alongside.
    """
    rows = []
    for N in N_values:
        rng = np.random.default_rng(seed + N)
        C = num_states or 2 * N + 1
        net = init_network(N, L, rng.integers(2**31))
        x = rng.standard_normal((batch_size, N))
        gamma = rng.dirichlet(np.ones(C), size=batch_size)
        params = GaussianStateParams(rng.uniform(-4, 4, (C, N)), rng.uniform(0.5, 1.5, (C, N)))
        grad_lower_bound(net, x, gamma, params, include_logdet=True)
        grad_lower_bound(net, x, gamma, params, include_logdet=False)
        with_t, without_t = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            grad_lower_bound(net, x, gamma, params, include_logdet=False)
            t1 = time.perf_counter()
            grad_lower_bound(net, x, gamma, params, include_logdet=True)
            t2 = time.perf_counter()
            without_t.append(t1 - t0)
            with_t.append(t2 - t1)
        with_t = np.array(with_t) * 1e3
        without_t = np.array(without_t) * 1e3
        rows.append(BenchmarkRow(N, float(np.median(with_t)), float(with_t.std()),
                                 float(np.median(without_t)), float(without_t.std())))
    return rows
