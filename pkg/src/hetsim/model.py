"""Model parameterization, routing selection functions and the jump-chain law.

Servers are indexed ``0..M-1`` internally; ranks are 1-based to match the
rank-selection law ``k(M, i, d)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .exceptions import ConfigurationError
from .streams import RandomStream

# Two selection values closer than this (relative) are treated as a tie.
TIE_RTOL = 1e-12
WEIGHT_TOL = 1e-12
ROUTING_BASES = ("system", "waiting")


@dataclass(frozen=True)
class Tandem:
    """Score ``1 + x_i / (mu_i g_i)``."""

    kind: str = field(default="tandem", init=False)

    def scores(self, x, mu, g):
        return 1.0 + np.asarray(x, dtype=float) / (mu * g)

    def to_dict(self):
        return {"kind": "tandem"}


@dataclass(frozen=True)
class Weighted:
    """Score ``1 + beta1 x_i + beta2 / mu_i + beta3 / g_i``."""

    beta1: float = 1.0 / 3.0
    beta2: float = 1.0 / 3.0
    beta3: float = 1.0 / 3.0
    kind: str = field(default="weighted", init=False)

    def __post_init__(self):
        betas = (self.beta1, self.beta2, self.beta3)
        for name, b in zip(("beta1", "beta2", "beta3"), betas):
            if not (b >= 0.0 and math.isfinite(b)):
                raise ConfigurationError(f"selection.{name} must be a nonnegative real, got {b!r}")
        if abs(sum(betas) - 1.0) > WEIGHT_TOL:
            raise ConfigurationError(f"selection betas must sum to 1, got {sum(betas)!r}")

    def scores(self, x, mu, g):
        x = np.asarray(x, dtype=float)
        return 1.0 + self.beta1 * x + self.beta2 / mu + self.beta3 / g

    def to_dict(self):
        return {"kind": "weighted", "betas": [self.beta1, self.beta2, self.beta3]}


SelectionKind = Tandem | Weighted


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Parameters of a supermarket model with ``M`` different servers.

    ``mu`` and ``g`` are stored as read-only float arrays.
    """

    M: int
    lam: float
    mu: np.ndarray
    g: np.ndarray
    d: int
    selection: SelectionKind = field(default_factory=Tandem)
    # "system": routing sees every job at a server; "waiting": only jobs not in service
    routing_basis: str = "system"

    def __post_init__(self):
        if isinstance(self.M, bool) or not isinstance(self.M, (int, np.integer)) or self.M < 1:
            raise ConfigurationError(f"M must be a positive integer, got {self.M!r}")
        mu = _as_vector("mu", self.mu, self.M)
        g = _as_vector("g", self.g, self.M)
        for i, m in enumerate(mu):
            if not (m > 0.0 and math.isfinite(m)):
                raise ConfigurationError(f"mu[{i}] must be a positive real, got {m!r}")
        for i, p in enumerate(g):
            if not (0.0 < p <= 1.0):
                raise ConfigurationError(f"g[{i}] must lie in (0, 1], got {p!r}")
        if not (self.lam > 0.0 and math.isfinite(self.lam)):
            raise ConfigurationError(f"lambda must be a positive real, got {self.lam!r}")
        if isinstance(self.d, bool) or not isinstance(self.d, (int, np.integer)) or not 1 <= self.d <= self.M:
            raise ConfigurationError(f"d must be an integer in [1, M={self.M}], got {self.d!r}")
        if not isinstance(self.selection, (Tandem, Weighted)):
            raise ConfigurationError(f"unknown selection kind {self.selection!r}")
        if self.routing_basis not in ROUTING_BASES:
            raise ConfigurationError(f"routing_basis must be one of {ROUTING_BASES}, got {self.routing_basis!r}")
        if abs(g.sum() - 1.0) > 1e-9:
            warnings.warn(f"g sums to {g.sum():.12g}, not 1", ConfigWarning, stacklevel=3)
        mu.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "g", g)

    @property
    def omega(self) -> float:
        """Uniformization rate ``lambda + sum(mu)``."""
        return self.lam + float(self.mu.sum())

    @property
    def is_stable(self) -> bool:
        return self.lam < float(self.mu.sum())

    def __eq__(self, other):
        if not isinstance(other, ModelConfig):
            return NotImplemented
        return (
            self.M == other.M
            and self.lam == other.lam
            and self.d == other.d
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.g, other.g)
            and self.selection == other.selection
            and self.routing_basis == other.routing_basis
        )

    def __hash__(self):
        return hash((self.M, self.lam, self.d, self.mu.tobytes(), self.g.tobytes(), self.selection, self.routing_basis))

    def replace(self, **changes) -> "ModelConfig":
        values = dict(
            M=self.M, lam=self.lam, mu=self.mu, g=self.g, d=self.d, selection=self.selection,
            routing_basis=self.routing_basis,
        )
        values.update(changes)
        return ModelConfig(**values)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "lambda": self.lam,
            "mu": [float(v) for v in self.mu],
            "g": [float(v) for v in self.g],
            "d": self.d,
            "selection": self.selection.to_dict(),
            "routing_basis": self.routing_basis,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        """Build a config from its JSON form, naming the offending field on error."""
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        for key in ("M", "lambda", "mu", "g", "d"):
            if key not in data:
                raise ConfigurationError(f"missing field {key!r}")
        M = data["M"]
        if isinstance(M, bool) or not isinstance(M, int):
            raise ConfigurationError(f"M must be a positive integer, got {M!r}")
        for key in ("mu", "g"):
            vals = data[key]
            if not isinstance(vals, list):
                raise ConfigurationError(f"{key} must be a list of {M} numbers")
            if M >= 1 and len(vals) < M:
                raise ConfigurationError(f"missing entry {key}[{len(vals)}]: expected {M} entries, got {len(vals)}")
            for i, v in enumerate(vals):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigurationError(f"{key}[{i}] must be a number, got {v!r}")
        lam = data["lambda"]
        if isinstance(lam, bool) or not isinstance(lam, (int, float)):
            raise ConfigurationError(f"lambda must be a number, got {lam!r}")
        sel = data.get("selection", {"kind": "tandem"})
        unknown = set(data) - {"M", "lambda", "mu", "g", "d", "selection", "routing_basis"}
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(
            M=M,
            lam=float(lam),
            mu=data["mu"],
            g=data["g"],
            d=data["d"],
            selection=selection_from_dict(sel),
            routing_basis=data.get("routing_basis", "system"),
        )


class ConfigWarning(UserWarning):
    """Non-fatal configuration issue (e.g. preferences not summing to 1)."""


def selection_from_dict(sel) -> SelectionKind:
    if not isinstance(sel, dict) or "kind" not in sel:
        raise ConfigurationError("selection must be an object with a 'kind' field")
    kind = sel["kind"]
    if kind == "tandem":
        return Tandem()
    if kind == "weighted":
        betas = sel.get("betas")
        if betas is None:
            return Weighted()
        if not isinstance(betas, list) or len(betas) != 3:
            raise ConfigurationError("selection.betas must be a list of 3 numbers")
        return Weighted(*map(float, betas))
    raise ConfigurationError(f"selection.kind must be 'tandem' or 'weighted', got {kind!r}")


def _as_vector(name, values, M):
    try:
        arr = np.array(values, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name} must be a vector of {M} reals") from exc
    if arr.shape[0] != M:
        raise ConfigurationError(f"{name} must have length M={M}, got {arr.shape[0]}")
    return arr


def check_state(cfg: ModelConfig, state) -> tuple[int, ...]:
    """Validate a queue-length vector against ``cfg`` and return it as a tuple."""
    x = tuple(int(v) for v in state)
    if len(x) != cfg.M:
        raise ConfigurationError(f"state has length {len(x)}, expected M={cfg.M}")
    if any(v < 0 for v in x):
        raise ConfigurationError(f"queue lengths must be nonnegative, got {x}")
    return x


class EventKind(Enum):
    ARRIVAL = "arrival"
    SERVICE = "service"
    PHANTOM = "phantom"


@dataclass(frozen=True)
class EventTag:
    kind: EventKind
    server: int | None = None


PHANTOM = EventTag(EventKind.PHANTOM)


@dataclass(frozen=True)
class SelectionProfile:
    delta: np.ndarray
    server_at_rank: np.ndarray  # rank r (0-based position) -> server index
    rank_of_server: np.ndarray  # server index -> 0-based rank

    def tie_groups(self):
        """Yield ``(start, stop)`` rank slices whose Δ values are tied."""
        sorted_delta = self.delta[self.server_at_rank]
        start = 0
        M = len(sorted_delta)
        for r in range(1, M + 1):
            if r == M or not _tied(sorted_delta[r - 1], sorted_delta[r]):
                yield start, r
                start = r


def _tied(a, b):
    return abs(a - b) <= TIE_RTOL * max(abs(a), abs(b))


def routed_lengths(cfg: ModelConfig, state) -> np.ndarray:
    """Queue lengths as seen by the routing rule under ``cfg.routing_basis``."""
    x = np.asarray(state, dtype=float)
    if cfg.routing_basis == "waiting":
        return np.maximum(x - 1.0, 0.0)
    return x


def selection_scores(cfg: ModelConfig, state) -> np.ndarray:
    """Unnormalized selection scores; Δ is these divided by their sum."""
    return cfg.selection.scores(routed_lengths(cfg, state), cfg.mu, cfg.g)


def selection_values(cfg: ModelConfig, state, rng: RandomStream | None = None) -> SelectionProfile:
    """Δ-vector at ``state`` and its ascending permutation.

    Tied Δ values are ordered by server index, or shuffled uniformly when
    ``rng`` is given.
    """
    x = check_state(cfg, state)
    scores = selection_scores(cfg, x)
    delta = scores / scores.sum()
    order = np.argsort(delta, kind="stable")
    if rng is not None:
        sorted_delta = delta[order]
        start = 0
        for r in range(1, cfg.M + 1):
            if r == cfg.M or not _tied(sorted_delta[r - 1], sorted_delta[r]):
                if r - start > 1:
                    order[start:r] = rng.permutation(order[start:r])
                start = r
    ranks = np.empty(cfg.M, dtype=int)
    ranks[order] = np.arange(cfg.M)
    delta.setflags(write=False)
    order.setflags(write=False)
    ranks.setflags(write=False)
    return SelectionProfile(delta=delta, server_at_rank=order, rank_of_server=ranks)


def rank_selection_probability(M: int, i: int, d: int) -> float:
    """Probability that the rank-``i`` server is the best of a random ``d``-subset.

    Equals ``d (M-i)! (M-d)! / ((M-i-d+1)! M!)`` for ``i <= M-d+1`` and zero
    otherwise, evaluated as a product of ratios so large ``M`` cannot overflow.
    """
    if not (isinstance(M, (int, np.integer)) and M >= 1):
        raise ValueError(f"M must be a positive integer, got {M!r}")
    if not 1 <= d <= M:
        raise ValueError(f"d must lie in [1, {M}], got {d!r}")
    if not 1 <= i <= M:
        raise ValueError(f"rank i must lie in [1, {M}], got {i!r}")
    if i > M - d + 1:
        return 0.0
    # (M-i)!/(M-i-d+1)! = prod_{j=0}^{d-2} (M-i-j);  (M-d)!/M! = 1/prod_{j=0}^{d-1} (M-j)
    p = d / M
    for j in range(d - 1):
        p *= (M - i - j) / (M - 1 - j)
    return p


def rank_selection_fraction(M: int, i: int, d: int) -> Fraction:
    """Exact rational value of :func:`rank_selection_probability`."""
    rank_selection_probability(M, i, d)  # argument checks
    if i > M - d + 1:
        return Fraction(0)
    f = math.factorial
    return Fraction(d * f(M - i) * f(M - d), f(M - i - d + 1) * f(M))


def rank_probabilities(M: int, d: int) -> np.ndarray:
    """Vector of ``k(M, i, d)`` for ranks ``i = 1..M``."""
    return np.array([rank_selection_probability(M, i, d) for i in range(1, M + 1)])


def arrival_rate_at_rank(cfg: ModelConfig, rank: int) -> float:
    return cfg.lam * rank_selection_probability(cfg.M, rank, cfg.d)


def routing_probabilities(cfg: ModelConfig, state, profile: SelectionProfile | None = None) -> np.ndarray:
    """Probability that the next arrival joins each server.

    Without an explicit ``profile`` the rank law is averaged over every
    ordering of tied servers, which is the exact expectation of the random
    tie-breaking sort. With a profile its ordering is used as given.
    """
    k = _rank_table(cfg.M, cfg.d)
    if profile is None:
        profile = selection_values(cfg, state)
        probs = np.empty(cfg.M)
        for start, stop in profile.tie_groups():
            probs[profile.server_at_rank[start:stop]] = k[start:stop].mean()
        return probs
    probs = np.empty(cfg.M)
    probs[profile.server_at_rank] = k
    return probs


def batch_deltas(cfg: ModelConfig, states: np.ndarray) -> np.ndarray:
    """Δ-vectors for each row of an ``(n, M)`` state array."""
    X = np.asarray(states, dtype=float)
    if cfg.routing_basis == "waiting":
        X = np.maximum(X - 1.0, 0.0)
    scores = cfg.selection.scores(X, cfg.mu, cfg.g)
    return scores / scores.sum(axis=1, keepdims=True)


def batch_routing_probabilities(cfg: ModelConfig, states: np.ndarray) -> np.ndarray:
    """Row-wise :func:`routing_probabilities` (tie-averaged) for an ``(n, M)`` array."""
    delta = batch_deltas(cfg, states)
    n, M = delta.shape
    k = _rank_table(M, cfg.d)
    order = np.argsort(delta, axis=1, kind="stable")
    srt = np.take_along_axis(delta, order, axis=1)
    new_group = np.ones((n, M), dtype=bool)
    if M > 1:
        a, b = srt[:, :-1], srt[:, 1:]
        new_group[:, 1:] = np.abs(b - a) > TIE_RTOL * np.maximum(np.abs(a), np.abs(b))
    gid = np.cumsum(new_group, axis=1) - 1 + (np.arange(n) * M)[:, None]
    flat = gid.ravel()
    sums = np.bincount(flat, weights=np.broadcast_to(k, (n, M)).ravel(), minlength=n * M)
    counts = np.bincount(flat, minlength=n * M)
    shared = (sums[flat] / counts[flat]).reshape(n, M)
    probs = np.empty((n, M))
    np.put_along_axis(probs, order, shared, axis=1)
    return probs


_RANK_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _rank_table(M, d):
    key = (M, d)
    table = _RANK_CACHE.get(key)
    if table is None:
        table = rank_probabilities(M, d)
        table.setflags(write=False)
        _RANK_CACHE[key] = table
    return table


@dataclass(frozen=True)
class TransitionDistribution:
    entries: tuple[tuple[tuple[int, ...], float, EventTag], ...]
    self_loop_probability: float

    @property
    def total_mass(self) -> float:
        return self.self_loop_probability + math.fsum(p for _, p, _ in self.entries)


def jump_distribution(
    cfg: ModelConfig,
    state,
    profile: SelectionProfile | None = None,
    *,
    paper_literal: bool = False,
) -> TransitionDistribution:
    """One-step law of the uniformized jump chain at ``state``.

    Service events at idle servers become a self-loop. With
    ``paper_literal=True`` that mass is dropped instead, so the row may be
    sub-stochastic.
    """
    x = check_state(cfg, state)
    omega = cfg.omega
    a = cfg.lam / omega
    route = routing_probabilities(cfg, x, profile)
    entries = []
    for s in range(cfg.M):
        if route[s] > 0.0:
            y = list(x)
            y[s] += 1
            entries.append((tuple(y), a * route[s], EventTag(EventKind.ARRIVAL, s)))
    idle = 0.0
    for j in range(cfg.M):
        b = cfg.mu[j] / omega
        if x[j] > 0:
            y = list(x)
            y[j] -= 1
            entries.append((tuple(y), b, EventTag(EventKind.SERVICE, j)))
        else:
            idle += b
    return TransitionDistribution(tuple(entries), 0.0 if paper_literal else idle)


def route_arrival(cfg: ModelConfig, state, rng: RandomStream, *, deterministic_ties: bool = False) -> int:
    """Sample ``d`` distinct servers and return the one with the smallest Δ."""
    sampled = rng.choice(cfg.M, size=cfg.d, replace=False)
    lengths = routed_lengths(cfg, [state[s] for s in sampled])
    scores = cfg.selection.scores(lengths, cfg.mu[sampled], cfg.g[sampled])
    best = scores.min()
    tied = [s for s, v in zip(sampled, scores) if _tied(v, best)]
    if len(tied) == 1:
        return int(tied[0])
    if deterministic_ties:
        return int(min(tied))
    return int(tied[rng.integers(len(tied))])
