"""Brute-force ground truth on a buffer-truncated state space.

Every queue is capped at ``B``; an arrival routed to a full queue is lost.
The explicit sparse generator then gives transient, discounted and
stationary quantities by standard linear algebra. Only meant for small
instances: the state space has ``(B+1)**M`` points.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import special
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .exceptions import CapacityError, ConfigurationError, NumericalError, StructuralError
from .model import TIE_RTOL, ModelConfig, check_state, rank_probabilities, selection_scores

DEFAULT_STATE_CAP = 200_000
DEFAULT_SERIES_BUDGET = 200_000


@dataclass(frozen=True)
class TruncatedSpace:
    M: int
    B: int

    def __post_init__(self):
        if self.B < 1:
            raise ConfigurationError("buffer cap B must be a positive integer")

    @property
    def size(self) -> int:
        return (self.B + 1) ** self.M

    @property
    def states(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.B + 1), repeat=self.M))

    def index(self, x) -> int:
        i = 0
        for v in x:
            if not 0 <= v <= self.B:
                raise ConfigurationError(f"state {tuple(x)} lies outside the truncated space (B={self.B})")
            i = i * (self.B + 1) + int(v)
        return i

    def state(self, i: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.M):
            i, v = divmod(i, self.B + 1)
            out.append(v)
        return tuple(reversed(out))


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    cfg: ModelConfig
    space: TruncatedSpace
    Q: sp.csr_matrix
    blocked_rate: np.ndarray  # lost arrival rate at each state
    tie_mode: str

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.Q.diagonal()

    def reward_vector(self, spec) -> np.ndarray:
        return np.array([spec(self.cfg, x) for x in self.space.states])

    def blocking_probability(self, dist: np.ndarray) -> float:
        """Fraction of offered arrivals lost under state distribution ``dist``."""
        return float(dist @ self.blocked_rate) / self.cfg.lam


def _server_probabilities(cfg, x, k, tie_mode):
    """Arrival split over servers; ties share their ranks' mass evenly."""
    scores = selection_scores(cfg, x)
    order = sorted(range(cfg.M), key=lambda s: (scores[s], s))
    probs = np.empty(cfg.M)
    if tie_mode == "index":
        for r, s in enumerate(order):
            probs[s] = k[r]
        return probs
    r = 0
    while r < cfg.M:
        e = r + 1
        while e < cfg.M and abs(scores[order[e]] - scores[order[r]]) <= TIE_RTOL * max(
            abs(scores[order[e]]), abs(scores[order[r]])
        ):
            e += 1
        share = sum(k[r:e]) / (e - r)
        for s in order[r:e]:
            probs[s] = share
        r = e
    return probs


def build_generator(
    cfg: ModelConfig, B: int, tie_mode: str = "average", *, state_cap: int = DEFAULT_STATE_CAP
) -> GeneratorMatrix:
    """Sparse generator of the model truncated at ``B`` jobs per queue.

    ``tie_mode='average'`` takes the exact expectation over random orderings
    of servers with equal selection values; ``'index'`` orders them by index.
    """
    if tie_mode not in ("average", "index"):
        raise ConfigurationError(f"tie_mode must be 'average' or 'index', got {tie_mode!r}")
    space = TruncatedSpace(cfg.M, B)
    n = space.size
    if n > state_cap:
        raise CapacityError(f"truncated space has {n} states, above the cap of {state_cap}")
    k = rank_probabilities(cfg.M, cfg.d)
    stride = [(B + 1) ** (cfg.M - 1 - j) for j in range(cfg.M)]
    rows, cols, vals = [], [], []
    blocked = np.zeros(n)
    diag = np.zeros(n)
    for i, x in enumerate(space.states):
        route = _server_probabilities(cfg, x, k, tie_mode)
        for s in range(cfg.M):
            rate = cfg.lam * route[s]
            if rate == 0.0:
                continue
            if x[s] == B:
                blocked[i] += rate
                continue
            rows.append(i)
            cols.append(i + stride[s])
            vals.append(rate)
            diag[i] += rate
        for j in range(cfg.M):
            if x[j] > 0:
                rows.append(i)
                cols.append(i - stride[j])
                vals.append(cfg.mu[j])
                diag[i] += cfg.mu[j]
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend(-diag)
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    Q.sum_duplicates()
    return GeneratorMatrix(cfg, space, Q, blocked, tie_mode)


def _point_mass(G, x0):
    x0 = check_state(G.cfg, x0)
    p = np.zeros(G.space.size)
    p[G.space.index(x0)] = 1.0
    return p


def transient_expected_reward(
    G: GeneratorMatrix,
    x0,
    spec,
    t: float,
    *,
    method: str = "uniformization",
    tol: float = 1e-12,
    series_budget: int = DEFAULT_SERIES_BUDGET,
) -> float:
    """``E[int_0^t r(X(s)) ds | X(0) = x0]`` on the truncated chain.

    Uniformization uses ``int_0^t p(s) ds = (1/L) sum_n P(N_{Lt} > n) p0 P^n``
    with ``P = I + Q/L``. ``method='expm'`` instead applies the exponential
    of the reward-augmented generator, which does not depend on ``L t``.
    """
    if t < 0:
        raise ConfigurationError("horizon t must be nonnegative")
    p = _point_mass(G, x0)
    if t == 0:
        return 0.0
    r = G.reward_vector(spec)
    if method == "expm":
        return _transient_expm(G, p, r, t)
    if method != "uniformization":
        raise ConfigurationError(f"unknown transient method {method!r}")
    L = float(G.exit_rates.max())
    if L == 0.0:
        return float(p @ r) * t
    mean = L * t
    n_terms = int(mean + 10 * math.sqrt(mean) + 20)
    while special.gammainc(n_terms + 1, mean) > tol * 1e-3:
        n_terms = int(n_terms * 1.5)
    if n_terms > series_budget:
        raise CapacityError(
            f"uniformization needs {n_terms} terms (L t = {mean:.3g}), above budget {series_budget}; use method='expm'"
        )
    tails = special.gammainc(np.arange(1, n_terms + 2), mean)
    PT = (sp.identity(G.space.size, format="csr") + G.Q / L).T.tocsr()
    acc = 0.0
    for n in range(n_terms + 1):
        acc += tails[n] * float(p @ r)
        p = PT @ p
    return acc / L


def _transient_expm(G, p, r, t):
    n = G.space.size
    A = sp.bmat([[G.Q, sp.csr_matrix(r.reshape(-1, 1))], [None, sp.csr_matrix((1, 1))]], format="csc")
    e = np.zeros(n + 1)
    e[-1] = 1.0
    col = spla.expm_multiply(A * t, e)
    return float(p @ col[:n])


def discounted_expected_reward(G: GeneratorMatrix, x0, spec, beta: float, *, rtol: float = 1e-10) -> float:
    """``E[int_0^inf exp(-beta s) r(X(s)) ds | X(0) = x0]`` via ``(beta I - Q) v = r``."""
    if not beta > 0:
        raise ConfigurationError("beta must be positive")
    i0 = G.space.index(check_state(G.cfg, x0))
    r = G.reward_vector(spec)
    A = (beta * sp.identity(G.space.size, format="csc") - G.Q).tocsc()
    v = spla.spsolve(A, r)
    resid = np.abs(A @ v - r).max()
    scale = max(np.abs(r).max(), 1e-300)
    if not np.all(np.isfinite(v)) or resid > rtol * scale:
        raise NumericalError(f"resolvent solve residual {resid:.3e} exceeds {rtol:g} relative")
    return float(v[i0])


@dataclass(frozen=True)
class StationaryResult:
    pi: np.ndarray
    mean_queue_lengths: np.ndarray
    blocking_probability: float
    residual: float


def _closed_class(Q) -> np.ndarray:
    """Indices of the unique closed communicating class of ``Q``."""
    n_comp, labels = csgraph.connected_components(Q, directed=True, connection="strong")
    if n_comp == 1:
        return np.arange(Q.shape[0])
    C = Q.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    off = (C.row != C.col) & (C.data > 0) & (labels[C.row] != labels[C.col])
    leaving[labels[C.row[off]]] = True
    closed = np.flatnonzero(~leaving)
    if closed.size != 1:
        raise StructuralError(f"truncated chain has {closed.size} closed communicating classes")
    return np.flatnonzero(labels == closed[0])


def stationary_distribution(G: GeneratorMatrix, *, tol: float = 1e-10) -> StationaryResult:
    """Solve ``pi Q = 0, sum(pi) = 1`` on the truncated space.

    States outside the single closed class (unreachable in the long run,
    e.g. when ``d = M`` forbids routing to a worse queue) get zero mass.
    """
    keep = _closed_class(G.Q)
    n = keep.size
    Qc = G.Q[keep][:, keep]
    A = Qc.T.tolil()
    A[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[n - 1] = 1.0
    pc = np.atleast_1d(spla.spsolve(A.tocsc(), b))
    pi = np.zeros(G.space.size)
    pi[keep] = pc
    pi = np.where(np.abs(pi) < 1e-300, 0.0, pi)
    resid = float(np.abs(G.Q.T @ pi).max()) / max(float(G.exit_rates.max()), 1e-300)
    if not np.all(np.isfinite(pi)) or resid > tol or pi.min() < -tol:
        raise NumericalError(f"stationary solve residual {resid:.3e} (min entry {pi.min():.3e})")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    X = np.array(G.space.states, dtype=float)
    return StationaryResult(pi, pi @ X, G.blocking_probability(pi), resid)
