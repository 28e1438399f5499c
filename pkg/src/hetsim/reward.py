"""Expected rewards of the supermarket Markov reward process.

Both series are driven by ``R_k``, the mean reward right after the k-th
event of the uniformized jump chain started from ``x``:

* finite horizon:  ``E[Phi(t)] = sum_n Pois(n; w t) * t/(n+1) * (r(x) + R_1 + ... + R_n)``
* discounted:      ``E[Psi(beta)] = sum_k theta_k(beta) * R_k``  with ``R_0 = r(x)``

``R_k`` is computed exactly by pushing the state distribution through the
jump chain level by level (identical states reached along different branches
of the event tree are merged), and by Monte Carlo over jump-chain paths once
the exact tree outgrows its node budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
from scipy import special, stats

from .exceptions import CapacityError, ConfigurationError
from .model import ModelConfig, batch_deltas, batch_routing_probabilities, check_state, selection_values
from .streams import make_stream

DEFAULT_NODE_BUDGET = 5_000_000
DEFAULT_EPSILON = 1e-10


# ---------------------------------------------------------------------------
# Reward specifications


@dataclass(frozen=True)
class RMin:
    """Smallest selection value at the state."""

    name = "rmin"
    bounded = True

    def __call__(self, cfg, x):
        return float(selection_values(cfg, x).delta.min())

    def batch(self, cfg, S):
        return batch_deltas(cfg, S).min(axis=1)

    def bound(self, cfg, x, depth):
        return 1.0


@dataclass(frozen=True)
class RMax:
    """Largest selection value at the state."""

    name = "rmax"
    bounded = True

    def __call__(self, cfg, x):
        return float(selection_values(cfg, x).delta.max())

    def batch(self, cfg, S):
        return batch_deltas(cfg, S).max(axis=1)

    def bound(self, cfg, x, depth):
        return 1.0


@dataclass(frozen=True)
class PerServerQueueLength:
    server: int
    bounded = False

    @property
    def name(self):
        return f"queue:{self.server}"

    def __call__(self, cfg, x):
        return float(x[self.server])

    def batch(self, cfg, S):
        return S[:, self.server].astype(float)

    def bound(self, cfg, x, depth):
        # each jump moves one job
        return float(x[self.server] + depth)


@dataclass(frozen=True)
class TotalQueueLength:
    name = "total"
    bounded = False

    def __call__(self, cfg, x):
        return float(sum(x))

    def batch(self, cfg, S):
        return S.sum(axis=1).astype(float)

    def bound(self, cfg, x, depth):
        return float(sum(x) + depth)


@dataclass(frozen=True)
class Constant:
    c: float
    bounded = True

    @property
    def name(self):
        return f"constant:{self.c!r}"

    def __call__(self, cfg, x):
        return float(self.c)

    def batch(self, cfg, S):
        return np.full(len(S), float(self.c))

    def bound(self, cfg, x, depth):
        return abs(float(self.c))


RewardSpec = RMin | RMax | PerServerQueueLength | TotalQueueLength | Constant


def parse_reward(text: str, M: int | None = None) -> RewardSpec:
    """Parse ``rmin``, ``rmax``, ``total``, ``queue:<server>`` or ``constant:<c>``."""
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    if name == "rmin" and not arg:
        return RMin()
    if name == "rmax" and not arg:
        return RMax()
    if name == "total" and not arg:
        return TotalQueueLength()
    try:
        if name == "queue":
            server = int(arg)
            if server < 0 or (M is not None and server >= M):
                raise ConfigurationError(f"queue server index {server} out of range")
            return PerServerQueueLength(server)
        if name == "constant":
            return Constant(float(arg))
    except ValueError as exc:
        raise ConfigurationError(f"bad reward argument in {text!r}") from exc
    raise ConfigurationError(f"unknown reward {text!r}; expected rmin, rmax, total, queue:<i> or constant:<c>")


def evaluate_reward(spec: RewardSpec, cfg: ModelConfig, state) -> float:
    return spec(cfg, check_state(cfg, state))


# ---------------------------------------------------------------------------
# Parameters and results


class Method(str, Enum):
    EXACT_TREE = "exact-tree"
    HYBRID_TREE_MC = "hybrid-tree-mc"
    MONTE_CARLO = "monte-carlo"


@dataclass(frozen=True)
class HorizonParams:
    """Truncation controls for the finite-horizon series.

    ``n_max`` and ``k_max`` default to the smallest Poisson truncation whose
    tail is below ``epsilon_tail``.
    """

    t: float
    n_max: int | None = None
    k_max: int | None = None
    epsilon_tail: float = DEFAULT_EPSILON
    mc_fallback_samples: int = 10_000
    node_budget: int = DEFAULT_NODE_BUDGET
    seed: int = 0

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise ConfigurationError(f"horizon t must be a positive real, got {self.t!r}")
        if not self.epsilon_tail > 0:
            raise ConfigurationError("epsilon_tail must be positive")
        if self.n_max is not None and self.n_max < 1:
            raise ConfigurationError("n_max must be a positive integer")
        if self.k_max is not None and self.k_max < 1:
            raise ConfigurationError("k_max must be a positive integer")
        if self.n_max is not None and self.k_max is not None and self.k_max > self.n_max:
            raise ConfigurationError("k_max must not exceed n_max")
        if self.mc_fallback_samples < 0:
            raise ConfigurationError("mc_fallback_samples must be nonnegative")


@dataclass(frozen=True)
class DiscountParams:
    beta: float
    k_max: int | None = None
    epsilon_tail: float = DEFAULT_EPSILON
    mc_fallback_samples: int = 10_000
    node_budget: int = DEFAULT_NODE_BUDGET
    seed: int = 0

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigurationError(f"discount rate beta must be a positive real, got {self.beta!r}")
        if not self.epsilon_tail > 0:
            raise ConfigurationError("epsilon_tail must be positive")
        if self.k_max is not None and self.k_max < 1:
            raise ConfigurationError("k_max must be a positive integer")
        if self.mc_fallback_samples < 0:
            raise ConfigurationError("mc_fallback_samples must be nonnegative")


@dataclass(frozen=True)
class RewardEstimate:
    """A series value with its error accounting.

    ``truncation_error_bound`` is ``tail_bound + standard_error``. The tail
    part is a worst-case bound (bounded rewards use ``sup |r|``; queue-length
    rewards use the fact that each jump moves a single job). The standard
    error only appears when Monte Carlo filled in deep levels, in which case
    ``heuristic`` is set.
    """

    value: float
    truncation_error_bound: float
    method: Method
    samples_used: int = 0
    tail_bound: float = 0.0
    standard_error: float = 0.0
    exact_depth: int = 0
    series_length: int = 0
    heuristic: bool = False
    nodes_expanded: int = 0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "truncation_error_bound": self.truncation_error_bound,
            "method": self.method.value,
            "samples_used": self.samples_used,
            "tail_bound": self.tail_bound,
            "standard_error": self.standard_error,
            "exact_depth": self.exact_depth,
            "series_length": self.series_length,
            "heuristic": self.heuristic,
            "nodes_expanded": self.nodes_expanded,
        }


# ---------------------------------------------------------------------------
# Jump chain


class JumpChain:
    """Uniformized jump chain of ``cfg``, advanced on whole arrays of states.

    A distribution is a pair ``(S, P)``: an ``(n, M)`` integer array of
    distinct states and their probabilities.
    """

    def __init__(self, cfg: ModelConfig, *, paper_literal: bool = False):
        self.cfg = cfg
        self.paper_literal = paper_literal
        self.nodes_expanded = 0
        self._a = cfg.lam / cfg.omega
        self._b = np.asarray(cfg.mu) / cfg.omega
        self._eye = np.eye(cfg.M, dtype=np.int64)

    @property
    def branching(self) -> int:
        return 2 * self.cfg.M + 1

    def outcomes(self, S):
        """Probabilities of the ``2M + 1`` outcomes at each row of ``S``.

        Columns are: arrival to server 0..M-1, service at 0..M-1, self-loop.
        A paper-literal chain gives the idle-service mass to no outcome.
        """
        n, M = S.shape
        out = np.empty((n, 2 * M + 1))
        out[:, :M] = self._a * batch_routing_probabilities(self.cfg, S)
        busy = S > 0
        out[:, M : 2 * M] = np.where(busy, self._b, 0.0)
        out[:, 2 * M] = 0.0 if self.paper_literal else np.where(busy, 0.0, self._b).sum(axis=1)
        return out

    def step(self, S, P):
        """Push the distribution ``(S, P)`` one jump forward, merging equal states."""
        n, M = S.shape
        W = self.outcomes(S) * P[:, None]
        succ = np.concatenate([S[:, None, :] + self._eye, S[:, None, :] - self._eye, S[:, None, :]], axis=1)
        live = W > 0.0
        succ, w = succ[live], W[live]
        top = int(succ.max(initial=0)) + 1
        if top ** M <= max(4 * len(succ), 1 << 16):
            # small key space: dense accumulation, no sort
            radix = top ** np.arange(M, dtype=np.int64)
            acc = np.bincount(succ @ radix, weights=w, minlength=top**M)
            keys = np.flatnonzero(acc)
            return (keys[:, None] // radix) % top, acc[keys]
        if top ** M < 2**62:
            key = succ @ (top ** np.arange(M, dtype=np.int64))
            uniq, inv = np.unique(key, return_inverse=True)
            first = np.zeros(len(uniq), dtype=np.int64)
            first[inv] = np.arange(len(inv))
            states = succ[first]
        else:
            states, inv = np.unique(succ, axis=0, return_inverse=True)
        return states, np.bincount(inv.ravel(), weights=w, minlength=len(states))

    def levels(self, x, depth: int, node_budget: int = DEFAULT_NODE_BUDGET) -> Iterator[tuple]:
        """Yield the state distribution after 0, 1, ..., ``depth`` jumps.

        Stops early (without raising) once expanding the next level would
        exceed ``node_budget`` tree nodes (distinct states times ``2M + 1``).
        """
        S = np.array([x], dtype=np.int64)
        P = np.ones(1)
        yield S, P
        nodes = 0
        for _ in range(depth):
            nodes += len(S) * self.branching
            if nodes > node_budget:
                return
            S, P = self.step(S, P)
            self.nodes_expanded = nodes
            yield S, P

    def sample_paths(self, S, steps: int, rng) -> Iterator[np.ndarray]:
        """Advance every row of ``S`` as an independent path; yield states after each jump.

        Each path consumes one uniform per jump, so all depths share the same
        random numbers. Rows of killed paths (paper-literal mass loss) are -1.
        """
        S = np.array(S, dtype=np.int64)
        M = self.cfg.M
        U = rng.random((len(S), steps))
        alive = np.ones(len(S), dtype=bool)
        moves = np.concatenate([self._eye, -self._eye, np.zeros((1, M), dtype=np.int64)])
        for k in range(steps):
            idx = np.flatnonzero(alive)
            cum = np.cumsum(self.outcomes(S[idx]), axis=1)
            pick = (cum <= U[idx, k][:, None]).sum(axis=1)
            dead = pick > 2 * M
            S[idx[~dead]] += moves[pick[~dead]]
            alive[idx[dead]] = False
            S[idx[dead]] = -1
            yield S


def _expected(spec, cfg, S, P) -> float:
    return math.fsum(P * spec.batch(cfg, S))


def re_k(
    cfg: ModelConfig,
    state,
    k: int,
    spec: RewardSpec,
    *,
    node_budget: int = DEFAULT_NODE_BUDGET,
    paper_literal: bool = False,
) -> float:
    """Exact mean reward after ``k`` jumps of the uniformized chain."""
    if k < 0:
        raise ConfigurationError("k must be nonnegative")
    x = check_state(cfg, state)
    chain = JumpChain(cfg, paper_literal=paper_literal)
    level = None
    depth = -1
    for depth, level in enumerate(chain.levels(x, k, node_budget)):
        pass
    if depth < k:
        raise CapacityError(
            f"exact event tree for k={k} exceeds the node budget of {node_budget}; "
            "use the Monte Carlo fallback (expected_reward_* with a smaller k_max)"
        )
    return _expected(spec, cfg, *level)


def re_sequence(cfg, state, spec, depth, *, node_budget=DEFAULT_NODE_BUDGET, paper_literal=False):
    """Exact ``[R_0, ..., R_K]`` with ``K <= depth`` limited by the node budget.

    Returns the values, the last level's distribution, the node count and the chain.
    """
    x = check_state(cfg, state)
    chain = JumpChain(cfg, paper_literal=paper_literal)
    values = []
    level = None
    for level in chain.levels(x, depth, node_budget):
        values.append(_expected(spec, cfg, *level))
    return values, level, chain.nodes_expanded, chain


def _mc_tail(chain, spec, level, first, weights, samples, seed):
    """Monte Carlo estimate of ``sum_{k>=first} weights[k] R_k`` from level ``first-1``.

    Start states are drawn from the exact distribution at level ``first-1``;
    every path serves all deeper levels at once.
    """
    cfg = chain.cfg
    rng = make_stream(seed, 0x5EED)
    S, P = level
    mass = float(P.sum())
    idx = rng.choice(len(S), size=samples, p=P / mass)
    totals = np.zeros(samples)
    for wk, X in zip(weights[first:], chain.sample_paths(S[idx], len(weights) - first, rng)):
        alive = X[:, 0] >= 0
        totals[alive] += wk * spec.batch(cfg, X[alive])
    mean = float(totals.mean()) * mass
    se = float(totals.std(ddof=1) / math.sqrt(samples)) * mass if samples > 1 else math.inf
    return mean, se


# ---------------------------------------------------------------------------
# Finite horizon


def poisson_tail(mean: float, n: int) -> float:
    """``P(N > n)`` for ``N ~ Poisson(mean)``."""
    return float(special.gammainc(n + 1, mean))


def poisson_truncation(mean: float, epsilon: float) -> int:
    """Smallest ``n`` with ``P(N > n) < epsilon``."""
    n = max(1, int(mean))
    while poisson_tail(mean, n) >= epsilon:
        n = int(n * 1.5) + 1
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if poisson_tail(mean, mid) < epsilon:
            hi = mid
        else:
            lo = mid + 1
    return max(lo, 1)


def horizon_weights(omega: float, t: float, n_max: int) -> np.ndarray:
    """Weight of ``R_k`` in the truncated finite-horizon series, ``k = 0..n_max``.

    ``w_k = t * sum_{n=k}^{n_max} Pois(n; omega t) / (n + 1)``.
    """
    n = np.arange(n_max + 1)
    pn = stats.poisson.pmf(n, omega * t)
    per = t * pn / (n + 1)
    return np.cumsum(per[::-1])[::-1]


def expected_reward_finite(
    cfg: ModelConfig,
    state,
    spec: RewardSpec,
    params: HorizonParams,
    *,
    paper_literal: bool = False,
) -> RewardEstimate:
    """Mean cumulative reward over ``[0, t]`` from ``state``."""
    x = check_state(cfg, state)
    omega, t = cfg.omega, params.t
    n_max = params.n_max if params.n_max is not None else poisson_truncation(omega * t, params.epsilon_tail)
    k_max = params.k_max if params.k_max is not None else n_max
    weights = horizon_weights(omega, t, n_max)

    values, level, nodes, chain = re_sequence(
        cfg, x, spec, min(k_max, n_max), node_budget=params.node_budget, paper_literal=paper_literal
    )
    exact_depth = len(values) - 1
    value = math.fsum(w * r for w, r in zip(weights, values))

    mean_jumps = omega * t
    tail_prob = poisson_tail(mean_jumps, n_max)
    if spec.bounded:
        tail = t * spec.bound(cfg, x, 0) * tail_prob
    else:
        # |r| after k jumps <= r0 + k, and E[N; N > n] = mean P(N > n - 1)
        r0 = spec.bound(cfg, x, 0)
        tail = t * (r0 * tail_prob + 0.5 * mean_jumps * poisson_tail(mean_jumps, n_max - 1))

    se = 0.0
    samples = 0
    method = Method.EXACT_TREE
    if exact_depth < n_max:
        if params.mc_fallback_samples < 2:
            raise CapacityError(
                f"exact tree stopped at depth {exact_depth} < n_max={n_max} and Monte Carlo fallback is disabled"
            )
        samples = params.mc_fallback_samples
        mc, se = _mc_tail(chain, spec, level, exact_depth + 1, weights, samples, params.seed)
        value += mc
        method = Method.HYBRID_TREE_MC if exact_depth > 0 else Method.MONTE_CARLO
    return RewardEstimate(
        value=value,
        truncation_error_bound=tail + se,
        method=method,
        samples_used=samples,
        tail_bound=tail,
        standard_error=se,
        exact_depth=exact_depth,
        series_length=n_max,
        heuristic=samples > 0,
        nodes_expanded=nodes,
    )


# ---------------------------------------------------------------------------
# Discounted


def theta_k(omega: float, beta: float, k: int) -> float:
    """Expected discounted length of the k-th inter-jump segment.

    ``(omega / (omega + beta))**k / (omega + beta)``; ``k = 0`` is the
    segment before the first jump.
    """
    if not beta > 0:
        raise ConfigurationError("beta must be positive")
    if k < 0:
        raise ConfigurationError("k must be nonnegative")
    return (omega / (omega + beta)) ** k / (omega + beta)


def theta_sequence(omega: float, beta: float, K: int) -> np.ndarray:
    q = omega / (omega + beta)
    return q ** np.arange(K + 1) / (omega + beta)


def discounted_tail(omega: float, beta: float, K: int, r0: float, growth: bool) -> float:
    """Bound on ``sum_{k>K} theta_k |R_k|`` given ``|R_k| <= r0 (+ k if growth)``."""
    q = omega / (omega + beta)
    qk = q ** (K + 1)
    s0 = qk / (1 - q)
    tail = r0 * s0
    if growth:
        tail += qk * ((K + 1) - K * q) / (1 - q) ** 2
    return tail / (omega + beta)


def discount_truncation(omega, beta, r0, growth, epsilon) -> int:
    K = 1
    while discounted_tail(omega, beta, K, r0, growth) >= epsilon:
        K = int(K * 1.5) + 1
    lo, hi = 1, K
    while lo < hi:
        mid = (lo + hi) // 2
        if discounted_tail(omega, beta, mid, r0, growth) < epsilon:
            hi = mid
        else:
            lo = mid + 1
    return lo


def expected_reward_discounted(
    cfg: ModelConfig,
    state,
    spec: RewardSpec,
    params: DiscountParams,
    *,
    paper_literal: bool = False,
) -> RewardEstimate:
    """Mean of ``int_0^inf exp(-beta t) r(X(t)) dt`` from ``state``."""
    x = check_state(cfg, state)
    omega, beta = cfg.omega, params.beta
    growth = not spec.bounded
    r0 = spec.bound(cfg, x, 0)
    K = params.k_max if params.k_max is not None else discount_truncation(omega, beta, r0, growth, params.epsilon_tail)
    theta = theta_sequence(omega, beta, K)

    values, level, nodes, chain = re_sequence(
        cfg, x, spec, K, node_budget=params.node_budget, paper_literal=paper_literal
    )
    exact_depth = len(values) - 1
    value = math.fsum(w * r for w, r in zip(theta, values))
    tail = discounted_tail(omega, beta, K, r0, growth)

    se = 0.0
    samples = 0
    method = Method.EXACT_TREE
    if exact_depth < K:
        if params.mc_fallback_samples < 2:
            raise CapacityError(
                f"exact tree stopped at depth {exact_depth} < k_max={K} and Monte Carlo fallback is disabled"
            )
        samples = params.mc_fallback_samples
        mc, se = _mc_tail(chain, spec, level, exact_depth + 1, theta, samples, params.seed)
        value += mc
        method = Method.HYBRID_TREE_MC if exact_depth > 0 else Method.MONTE_CARLO
    return RewardEstimate(
        value=value,
        truncation_error_bound=tail + se,
        method=method,
        samples_used=samples,
        tail_bound=tail,
        standard_error=se,
        exact_depth=exact_depth,
        series_length=K,
        heuristic=samples > 0,
        nodes_expanded=nodes,
    )


# ---------------------------------------------------------------------------
# Design criteria


@dataclass(frozen=True)
class CandidateResult:
    cfg: ModelConfig
    psi_min: RewardEstimate
    psi_max: RewardEstimate

    @property
    def gap(self) -> float:
        return self.psi_max.value - self.psi_min.value


@dataclass(frozen=True)
class DesignReport:
    candidates: tuple[CandidateResult, ...]
    best_rmin: int  # argmax of Psi(beta, r_min)
    best_rmax: int  # argmin of Psi(beta, r_max)
    best_gap: int  # argmin of the gap
    criterion_one_value: float
    criterion_two_value: float
    criterion_one: bool
    criterion_two: bool
    beta: float
    delta1: float
    delta2: float

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "candidates": [
                {
                    "config": c.cfg.to_dict(),
                    "psi_rmin": c.psi_min.to_dict(),
                    "psi_rmax": c.psi_max.to_dict(),
                    "gap": c.gap,
                }
                for c in self.candidates
            ],
            "argmax_psi_rmin": self.best_rmin,
            "argmin_psi_rmax": self.best_rmax,
            "argmin_gap": self.best_gap,
            "criterion_one_value": self.criterion_one_value,
            "criterion_two_value": self.criterion_two_value,
            "criterion_one": self.criterion_one,
            "criterion_two": self.criterion_two,
        }


def evaluate_design_criteria(
    cfgs: Sequence[ModelConfig],
    state,
    beta: float,
    delta1: float,
    delta2: float,
    params: DiscountParams | None = None,
) -> DesignReport:
    """Score a finite grid of candidate designs by their discounted r_min / r_max rewards.

    Criterion one holds when ``|min Psi(r_max) - max Psi(r_min)| < delta1``,
    criterion two when the smallest gap ``Psi(r_max) - Psi(r_min)`` is below
    ``delta2``.
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise ConfigurationError("candidate list is empty")
    if params is None:
        params = DiscountParams(beta=beta)
    elif params.beta != beta:
        raise ConfigurationError("params.beta disagrees with beta")
    results = []
    for cfg in cfgs:
        lo = expected_reward_discounted(cfg, state, RMin(), params)
        hi = expected_reward_discounted(cfg, state, RMax(), params)
        results.append(CandidateResult(cfg, lo, hi))
    psi_min = np.array([r.psi_min.value for r in results])
    psi_max = np.array([r.psi_max.value for r in results])
    gaps = psi_max - psi_min
    i_min, i_max, i_gap = int(np.argmax(psi_min)), int(np.argmin(psi_max)), int(np.argmin(gaps))
    c1 = abs(psi_max[i_max] - psi_min[i_min])
    c2 = gaps[i_gap]
    return DesignReport(
        candidates=tuple(results),
        best_rmin=i_min,
        best_rmax=i_max,
        best_gap=i_gap,
        criterion_one_value=float(c1),
        criterion_two_value=float(c2),
        criterion_one=bool(c1 < delta1),
        criterion_two=bool(c2 < delta2),
        beta=beta,
        delta1=delta1,
        delta2=delta2,
    )
