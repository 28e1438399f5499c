"""Discrete-event simulation of the untruncated supermarket model.

Next-event time advance over one Poisson arrival clock and one exponential
service clock per busy server. Queue lengths count the job in service.
"""
from __future__ import annotations

import heapq
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import ConfigurationError
from .model import TIE_RTOL, ModelConfig, Tandem, check_state
from .reward import Method, RewardEstimate
from .streams import make_stream

_BATCH = 1 << 14


class UnstableConfigWarning(UserWarning):
    """Arrival rate is at least the total service rate."""


@dataclass(frozen=True)
class SimPlan:
    warmup_time: float = 1_000.0
    measure_time: float = 10_000.0
    replications: int = 30
    seed: int = 0
    initial_state: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.warmup_time >= 0:
            raise ConfigurationError("warmup_time must be nonnegative")
        if not self.measure_time > 0:
            raise ConfigurationError("measure_time must be positive")
        if self.replications < 1:
            raise ConfigurationError("replications must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return {
            "warmup_time": self.warmup_time,
            "measure_time": self.measure_time,
            "replications": self.replications,
            "seed": self.seed,
            "initial_state": None if self.initial_state is None else list(self.initial_state),
        }


@dataclass(frozen=True)
class SimStats:
    per_server_mean_queue_length: np.ndarray
    per_server_ci_halfwidth: np.ndarray
    total_mean: float
    total_ci_halfwidth: float
    arrivals_observed: int
    utilization: np.ndarray
    throughput: np.ndarray
    per_server_mean_waiting: np.ndarray
    per_server_waiting_ci_halfwidth: np.ndarray
    replication_means: np.ndarray = field(repr=False)  # (replications, M)
    unstable: bool = False

    def means(self, metric: str = "system") -> np.ndarray:
        """Per-server means of jobs in system (``"system"``) or waiting (``"waiting"``)."""
        if metric == "system":
            return self.per_server_mean_queue_length
        if metric == "waiting":
            return self.per_server_mean_waiting
        raise ConfigurationError(f"metric must be 'system' or 'waiting', got {metric!r}")

    def ci_halfwidths(self, metric: str = "system") -> np.ndarray:
        if metric == "system":
            return self.per_server_ci_halfwidth
        if metric == "waiting":
            return self.per_server_waiting_ci_halfwidth
        raise ConfigurationError(f"metric must be 'system' or 'waiting', got {metric!r}")

    def to_dict(self) -> dict:
        def clean(v):
            return [None if not math.isfinite(float(a)) else float(a) for a in v]

        return {
            "per_server_mean_queue_length": clean(self.per_server_mean_queue_length),
            "per_server_ci_halfwidth": clean(self.per_server_ci_halfwidth),
            "total_mean": float(self.total_mean),
            "total_ci_halfwidth": None if not math.isfinite(self.total_ci_halfwidth) else float(self.total_ci_halfwidth),
            "arrivals_observed": int(self.arrivals_observed),
            "utilization": clean(self.utilization),
            "throughput": clean(self.throughput),
            "per_server_mean_waiting": clean(self.per_server_mean_waiting),
            "per_server_waiting_ci_halfwidth": clean(self.per_server_waiting_ci_halfwidth),
            "unstable": self.unstable,
        }


class _Draws:
    """Buffered uniforms and unit exponentials from one stream."""

    def __init__(self, rng):
        self.rng = rng
        self._u = rng.random(_BATCH)
        self._e = rng.standard_exponential(_BATCH)
        self._iu = 0
        self._ie = 0

    def uniform(self):
        if self._iu == _BATCH:
            self._u = self.rng.random(_BATCH)
            self._iu = 0
        v = self._u[self._iu]
        self._iu += 1
        return v

    def exponential(self):
        if self._ie == _BATCH:
            self._e = self.rng.standard_exponential(_BATCH)
            self._ie = 0
        v = self._e[self._ie]
        self._ie += 1
        return v


class _Router:
    """Power-of-d routing on the scores ``slope[s] * x[s] + offset[s]``.

    Both selection forms are affine in the queue length, and the common
    normalizing denominator does not change the argmin.
    """

    def __init__(self, cfg: ModelConfig, draws: _Draws):
        mu = cfg.mu.astype(float)
        g = cfg.g.astype(float)
        sel = cfg.selection
        if isinstance(sel, Tandem):
            self.slope = list(1.0 / (mu * g))
            self.offset = [1.0] * cfg.M
        else:
            self.slope = [sel.beta1] * cfg.M
            self.offset = list(1.0 + sel.beta2 / mu + sel.beta3 / g)
        self.M, self.d = cfg.M, cfg.d
        self.waiting = cfg.routing_basis == "waiting"
        self.perm = list(range(cfg.M))
        self.draws = draws

    def __call__(self, x) -> int:
        M, perm, u = self.M, self.perm, self.draws.uniform
        best = -1
        best_score = 0.0
        tied = None
        slope, offset = self.slope, self.offset
        for j in range(self.d):
            r = j + int(u() * (M - j))
            perm[j], perm[r] = perm[r], perm[j]
            s = perm[j]
            q = x[s]
            if self.waiting and q > 0:
                q -= 1
            score = slope[s] * q + offset[s]
            if best < 0:
                best, best_score = s, score
                continue
            tol = TIE_RTOL * max(abs(score), abs(best_score))
            if score < best_score - tol:
                best, best_score, tied = s, score, None
            elif score <= best_score + tol:
                if tied is None:
                    tied = [best]
                tied.append(s)
        if tied is None:
            return best
        return tied[int(u() * len(tied))]


def _replication(cfg: ModelConfig, plan: SimPlan, rep: int):
    rng = make_stream(plan.seed, rep)
    draws = _Draws(rng)
    route = _Router(cfg, draws)
    exp = draws.exponential
    M = cfg.M
    lam = cfg.lam
    inv_mu = [1.0 / m for m in cfg.mu]
    x = list(plan.initial_state) if plan.initial_state is not None else [0] * M
    warm = plan.warmup_time
    end = warm + plan.measure_time

    area = [0.0] * M
    busy = [0.0] * M
    last = [0.0] * M
    departures = [0] * M
    arrivals = 0
    measuring = warm == 0.0

    deps = []  # (time, server); a busy server has exactly one pending departure
    for s in range(M):
        if x[s] > 0:
            deps.append((exp() * inv_mu[s], s))
    heapq.heapify(deps)
    now = 0.0
    next_arrival = exp() / lam

    while True:
        if deps and deps[0][0] < next_arrival:
            t_ev, s = deps[0]
            is_arrival = False
        else:
            t_ev = next_arrival
            is_arrival = True
        if not measuring and t_ev >= warm:
            for j in range(M):
                area[j] = busy[j] = 0.0
                last[j] = warm
            measuring = True
        if t_ev >= end:
            break
        now = t_ev
        if is_arrival:
            s = route(x)
            if measuring:
                arrivals += 1
            q = x[s]
            if q > 0:
                area[s] += q * (now - last[s])
                busy[s] += now - last[s]
            last[s] = now
            x[s] = q + 1
            if q == 0:
                heapq.heappush(deps, (now + exp() * inv_mu[s], s))
            next_arrival = now + exp() / lam
        else:
            q = x[s]
            area[s] += q * (now - last[s])
            busy[s] += now - last[s]
            last[s] = now
            x[s] = q - 1
            if measuring:
                departures[s] += 1
            if q > 1:
                heapq.heapreplace(deps, (now + exp() * inv_mu[s], s))
            else:
                heapq.heappop(deps)

    for j in range(M):
        if x[j] > 0:
            area[j] += x[j] * (end - last[j])
            busy[j] += end - last[j]
    T = plan.measure_time
    return (
        np.array(area) / T,
        np.array(busy) / T,
        np.array(departures) / T,
        arrivals,
    )


def _workers(requested: int | None) -> int:
    cap = os.environ.get("HETSIM_THREADS")
    n = requested if requested is not None else 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError(f"HETSIM_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def _ci_halfwidth(samples: np.ndarray, level: float = 0.95) -> np.ndarray:
    n = samples.shape[0]
    if n < 2:
        return np.full(samples.shape[1:], math.nan)
    q = stats.t.ppf(0.5 + level / 2, n - 1)
    return q * samples.std(axis=0, ddof=1) / math.sqrt(n)


def simulate(cfg: ModelConfig, plan: SimPlan, *, workers: int | None = None) -> SimStats:
    """Run ``plan.replications`` independent replications and pool them.

    Replication ``r`` draws from substream ``r`` of ``plan.seed``; results are
    combined in replication order, so the output does not depend on
    ``workers``.
    """
    if plan.initial_state is not None:
        check_state(cfg, plan.initial_state)
    unstable = not cfg.is_stable
    if unstable:
        warnings.warn(
            f"lambda={cfg.lam} >= total service rate {cfg.mu.sum():.6g}; time averages may not converge",
            UnstableConfigWarning,
            stacklevel=2,
        )
    n = _workers(workers)
    reps = range(plan.replications)
    if n > 1 and plan.replications > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_replication, [cfg] * len(reps), [plan] * len(reps), reps))
    else:
        results = [_replication(cfg, plan, r) for r in reps]
    means = np.array([r[0] for r in results])
    util = np.array([r[1] for r in results])
    thr = np.array([r[2] for r in results])
    totals = means.sum(axis=1)
    # time average of (x - 1)^+ is the time average of x minus the busy fraction
    waiting = np.clip(means - util, 0.0, None)
    return SimStats(
        per_server_mean_queue_length=means.mean(axis=0),
        per_server_ci_halfwidth=_ci_halfwidth(means),
        total_mean=float(totals.mean()),
        total_ci_halfwidth=float(_ci_halfwidth(totals[:, None])[0]),
        arrivals_observed=int(sum(r[3] for r in results)),
        utilization=util.mean(axis=0),
        throughput=thr.mean(axis=0),
        per_server_mean_waiting=waiting.mean(axis=0),
        per_server_waiting_ci_halfwidth=_ci_halfwidth(waiting),
        replication_means=means,
        unstable=unstable,
    )


def mc_reward_estimates(cfg: ModelConfig, x0, specs, t: float, paths: int, seed: int) -> list[RewardEstimate]:
    """Path-wise estimates of ``E[int_0^t r(X(s)) ds]`` for several rewards at once.

    Each path alternates exponential holding times (rate ``lambda`` plus the
    rates of busy servers) with a sampled event, routing arrivals through
    the power-of-d rule. All rewards share the same paths.
    """
    if paths < 1:
        raise ConfigurationError("paths must be at least 1")
    if t < 0:
        raise ConfigurationError("horizon t must be nonnegative")
    x0 = check_state(cfg, x0)
    specs = list(specs)
    if t == 0:
        return [RewardEstimate(0.0, 0.0, Method.MONTE_CARLO, samples_used=paths) for _ in specs]
    draws = _Draws(make_stream(seed, 0x4D43))
    route = _Router(cfg, draws)
    mu = [float(m) for m in cfg.mu]
    lam = cfg.lam
    M = cfg.M
    cache: dict = {}
    totals = np.zeros((paths, len(specs)))
    for p in range(paths):
        x = list(x0)
        now = 0.0
        acc = [0.0] * len(specs)
        while True:
            key = tuple(x)
            rv = cache.get(key)
            if rv is None:
                rv = [s(cfg, key) for s in specs]
                cache[key] = rv
            rate = lam + sum(mu[j] for j in range(M) if x[j] > 0)
            hold = draws.exponential() / rate
            if now + hold >= t:
                for i, r in enumerate(rv):
                    acc[i] += r * (t - now)
                break
            for i, r in enumerate(rv):
                acc[i] += r * hold
            now += hold
            u = draws.uniform() * rate
            if u < lam:
                x[route(x)] += 1
                continue
            u -= lam
            for j in range(M):
                if x[j] > 0:
                    if u < mu[j]:
                        break
                    u -= mu[j]
            else:  # rounding at the top edge of the last busy server
                j = max(i for i in range(M) if x[i] > 0)
            x[j] -= 1
        totals[p] = acc
    mean = totals.mean(axis=0)
    se = totals.std(axis=0, ddof=1) / math.sqrt(paths) if paths > 1 else np.full(len(specs), math.inf)
    return [
        RewardEstimate(
            value=float(m),
            truncation_error_bound=float(e),
            method=Method.MONTE_CARLO,
            samples_used=paths,
            standard_error=float(e),
            heuristic=True,
        )
        for m, e in zip(mean, se)
    ]


def mc_reward_estimate(cfg: ModelConfig, x0, spec, t: float, paths: int, seed: int) -> RewardEstimate:
    return mc_reward_estimates(cfg, x0, [spec], t, paths, seed)[0]
