"""scikit-learn style wrappers over the functional API.

The model is fixed by constructor parameters; ``fit`` validates them and
does the expensive work, ``predict`` maps initial states (rows of ``X``) to
rewards. Fitted attributes end in an underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError
from .model import ModelConfig, Tandem, Weighted
from .oracle import build_generator, discounted_expected_reward, stationary_distribution, transient_expected_reward
from .reward import (
    DiscountParams,
    HorizonParams,
    expected_reward_discounted,
    expected_reward_finite,
    parse_reward,
)
from .sim import SimPlan, simulate


def check_states(X, M: int) -> np.ndarray:
    """Validate a 2-D array of initial states: ``M`` nonnegative integer columns."""
    X = check_array(X, dtype=None, ensure_2d=True)
    if X.shape[1] != M:
        raise ConfigurationError(f"states have {X.shape[1]} columns, expected M={M}")
    if not np.all(np.equal(np.mod(X, 1), 0)):
        raise ConfigurationError("states must be integer queue lengths")
    if np.any(X < 0):
        raise ConfigurationError("queue lengths must be nonnegative")
    return X.astype(np.int64)


class _ModelParams(BaseEstimator):
    def _config(self) -> ModelConfig:
        if self.selection == "tandem":
            sel = Tandem()
        elif self.selection == "weighted":
            sel = Weighted(*self.betas) if self.betas is not None else Weighted()
        else:
            raise ConfigurationError(f"selection must be 'tandem' or 'weighted', got {self.selection!r}")
        mu = tuple(np.atleast_1d(self.mu).tolist())
        return ModelConfig(
            M=len(mu), lam=self.lam, mu=mu, g=tuple(np.atleast_1d(self.g).tolist()), d=self.d,
            selection=sel, routing_basis=self.routing_basis,
        )


class SupermarketSimulator(_ModelParams):
    """Discrete-event estimate of long-run per-server queue lengths.

    ``fit`` runs the replications; ``predict`` returns the per-server means
    of ``metric`` ("system", "waiting" or "utilization") for any input.
    """

    def __init__(self, lam=1.0, mu=(1.0,), g=(1.0,), d=1, selection="tandem", betas=None,
                 routing_basis="system", warmup_time=1_000.0, measure_time=10_000.0,
                 replications=30, seed=0, workers=None):
        self.lam = lam
        self.mu = mu
        self.g = g
        self.d = d
        self.selection = selection
        self.betas = betas
        self.routing_basis = routing_basis
        self.warmup_time = warmup_time
        self.measure_time = measure_time
        self.replications = replications
        self.seed = seed
        self.workers = workers

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        plan = SimPlan(self.warmup_time, self.measure_time, self.replications, self.seed)
        self.stats_ = simulate(self.config_, plan, workers=self.workers)
        self.mean_queue_length_ = self.stats_.per_server_mean_queue_length
        self.ci_halfwidth_ = self.stats_.per_server_ci_halfwidth
        return self

    def predict(self, X=None, metric="system"):
        check_is_fitted(self, "stats_")
        if metric == "utilization":
            return self.stats_.utilization
        return self.stats_.means(metric)


class RewardEstimator(_ModelParams):
    """Expected reward from each initial state via the event-tree series.

    ``horizon`` set gives the finite-horizon integral up to ``horizon``;
    otherwise ``beta`` gives the discounted reward.
    """

    def __init__(self, lam=1.0, mu=(1.0,), g=(1.0,), d=1, selection="tandem", betas=None,
                 routing_basis="system", reward="rmin", horizon=None, beta=1.0,
                 epsilon_tail=1e-10, node_budget=5_000_000, mc_fallback_samples=10_000,
                 seed=0, paper_literal=False):
        self.lam = lam
        self.mu = mu
        self.g = g
        self.d = d
        self.selection = selection
        self.betas = betas
        self.routing_basis = routing_basis
        self.reward = reward
        self.horizon = horizon
        self.beta = beta
        self.epsilon_tail = epsilon_tail
        self.node_budget = node_budget
        self.mc_fallback_samples = mc_fallback_samples
        self.seed = seed
        self.paper_literal = paper_literal

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.spec_ = parse_reward(self.reward, self.config_.M) if isinstance(self.reward, str) else self.reward
        common = dict(epsilon_tail=self.epsilon_tail, node_budget=self.node_budget,
                      mc_fallback_samples=self.mc_fallback_samples, seed=self.seed)
        if self.horizon is not None:
            self.params_ = HorizonParams(t=self.horizon, **common)
        else:
            self.params_ = DiscountParams(beta=self.beta, **common)
        return self

    def predict(self, X):
        check_is_fitted(self, "config_")
        X = check_states(X, self.config_.M)
        fn = expected_reward_finite if self.horizon is not None else expected_reward_discounted
        self.estimates_ = [
            fn(self.config_, tuple(row), self.spec_, self.params_, paper_literal=self.paper_literal) for row in X
        ]
        return np.array([e.value for e in self.estimates_])


class CTMCOracle(_ModelParams):
    """Truncated-state-space ground truth.

    ``fit`` builds the generator and its stationary law; ``predict`` returns
    transient (``horizon``) or discounted (``beta``) rewards per initial state.
    """

    def __init__(self, lam=1.0, mu=(1.0,), g=(1.0,), d=1, selection="tandem", betas=None,
                 routing_basis="system", buffer=6, tie_mode="average", reward="total",
                 horizon=None, beta=1.0):
        self.lam = lam
        self.mu = mu
        self.g = g
        self.d = d
        self.selection = selection
        self.betas = betas
        self.routing_basis = routing_basis
        self.buffer = buffer
        self.tie_mode = tie_mode
        self.reward = reward
        self.horizon = horizon
        self.beta = beta

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.generator_ = build_generator(self.config_, self.buffer, tie_mode=self.tie_mode)
        self.stationary_ = stationary_distribution(self.generator_)
        self.mean_queue_length_ = self.stationary_.mean_queue_lengths
        self.spec_ = parse_reward(self.reward, self.config_.M) if isinstance(self.reward, str) else self.reward
        return self

    def predict(self, X):
        check_is_fitted(self, "generator_")
        X = check_states(X, self.config_.M)
        if self.horizon is not None:
            return np.array([transient_expected_reward(self.generator_, tuple(r), self.spec_, self.horizon) for r in X])
        return np.array([discounted_expected_reward(self.generator_, tuple(r), self.spec_, self.beta) for r in X])
