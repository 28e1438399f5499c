import math
import warnings

import numpy as np
import pytest
from oracles import mm1_mean_queue_length
from scipy import stats

from hetsim import (
    ConfigurationError,
    Constant,
    ModelConfig,
    RMin,
    SimPlan,
    TotalQueueLength,
    build_generator,
    make_stream,
    mc_reward_estimate,
    simulate,
    transient_expected_reward,
)
from hetsim.model import routing_probabilities
from hetsim.sim import UnstableConfigWarning, _Draws, _Router, mc_reward_estimates

SHORT = SimPlan(warmup_time=200.0, measure_time=4_000.0, replications=8, seed=7)


def test_mm1_mean_queue_length():
    cfg = ModelConfig(1, 1.0, (2.0,), (1.0,), 1)
    st = simulate(cfg, SimPlan(warmup_time=100.0, measure_time=20_000.0, replications=10, seed=1))
    target = mm1_mean_queue_length(1.0, 2.0)
    assert abs(st.per_server_mean_queue_length[0] - target) < max(3 * st.per_server_ci_halfwidth[0], 0.03)
    assert st.utilization[0] == pytest.approx(0.5, abs=0.01)
    assert st.throughput[0] == pytest.approx(1.0, abs=0.02)
    # waiting = L - utilization for a single server
    assert st.per_server_mean_waiting[0] == pytest.approx(0.5, abs=0.03)


def test_symmetric_servers_are_exchangeable():
    cfg = ModelConfig(3, 2.0, (1.0,) * 3, (1 / 3,) * 3, 2)
    st = simulate(cfg, SHORT)
    L, ci = st.per_server_mean_queue_length, st.per_server_ci_halfwidth
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(L[i] - L[j]) < 2 * (ci[i] + ci[j])


def test_same_seed_is_bit_identical_and_workers_do_not_matter():
    cfg = ModelConfig(3, 2.0, (1.0, 1.5, 0.8), (0.3, 0.3, 0.4), 2)
    plan = SimPlan(warmup_time=50.0, measure_time=500.0, replications=4, seed=123)
    a = simulate(cfg, plan)
    b = simulate(cfg, plan)
    c = simulate(cfg, plan, workers=2)
    assert a.to_dict() == b.to_dict() == c.to_dict()
    other = simulate(cfg, SimPlan(warmup_time=50.0, measure_time=500.0, replications=4, seed=124))
    assert other.to_dict() != a.to_dict()


def test_initial_state_and_single_replication():
    cfg = ModelConfig(2, 1.0, (1.0, 1.0), (0.5, 0.5), 1)
    st = simulate(cfg, SimPlan(warmup_time=0.0, measure_time=50.0, replications=1, initial_state=(5, 0)))
    assert np.all(np.isnan(st.per_server_ci_halfwidth))
    assert st.to_dict()["per_server_ci_halfwidth"] == [None, None]


def test_unstable_config_warns():
    cfg = ModelConfig(1, 3.0, (2.0,), (1.0,), 1)
    with pytest.warns(UnstableConfigWarning):
        st = simulate(cfg, SimPlan(warmup_time=0.0, measure_time=20.0, replications=2))
    assert st.unstable


@pytest.mark.parametrize(
    "kw", [dict(warmup_time=-1.0), dict(measure_time=0.0), dict(replications=0), dict(seed=-1)]
)
def test_plan_validation(kw):
    with pytest.raises(ConfigurationError):
        SimPlan(**kw)


def test_threads_env_caps_workers(monkeypatch):
    from hetsim.sim import _workers

    monkeypatch.setenv("HETSIM_THREADS", "1")
    assert _workers(8) == 1
    monkeypatch.setenv("HETSIM_THREADS", "x")
    with pytest.raises(ConfigurationError):
        _workers(2)


@pytest.mark.parametrize("basis", ["system", "waiting"])
def test_router_matches_tie_averaged_routing_law(basis):
    cfg = ModelConfig(5, 1.0, (1.0, 1.0, 2.0, 3.0, 0.5), (0.2,) * 5, 3, routing_basis=basis)
    x = [1, 1, 2, 0, 4]
    route = _Router(cfg, _Draws(make_stream(9)))
    n = 40_000
    counts = np.bincount([route(x) for _ in range(n)], minlength=5)
    p = routing_probabilities(cfg, x)
    live = p > 0
    assert counts[~live].sum() == 0
    assert stats.chisquare(counts[live], n * p[live]).pvalue > 1e-3


def test_power_of_d_reduces_total_queue():
    base = ModelConfig(4, 3.2, (1.0,) * 4, (0.25,) * 4, 1)
    plan = SimPlan(warmup_time=100.0, measure_time=3_000.0, replications=6, seed=3)
    t1 = simulate(base, plan)
    t2 = simulate(base.replace(d=2), plan)
    assert t2.total_mean + t2.total_ci_halfwidth < t1.total_mean - t1.total_ci_halfwidth


# -- path-wise reward estimates --------------------------------------------


def test_mc_constant_is_exact_and_zero_horizon():
    cfg = ModelConfig(2, 1.0, (1.0, 2.0), (0.5, 0.5), 2)
    est = mc_reward_estimate(cfg, (0, 0), Constant(2.0), 3.0, 200, 0)
    assert est.value == pytest.approx(6.0, rel=1e-12)
    assert est.standard_error < 1e-12
    assert mc_reward_estimate(cfg, (1, 0), RMin(), 0.0, 10, 0).value == 0.0


def test_mc_single_server_matches_oracle():
    cfg = ModelConfig(1, 1.0, (2.0,), (1.0,), 1)
    est = mc_reward_estimate(cfg, (1,), TotalQueueLength(), 1.0, 100_000, 4)
    ref = transient_expected_reward(build_generator(cfg, 64), (1,), TotalQueueLength(), 1.0)
    assert abs(est.value - ref) < 3 * est.standard_error


def test_mc_shares_paths_across_rewards():
    cfg = ModelConfig(2, 1.0, (1.0, 2.0), (0.5, 0.5), 2)
    a, b = mc_reward_estimates(cfg, (1, 1), [RMin(), TotalQueueLength()], 2.0, 500, 11)
    assert b.value == pytest.approx(mc_reward_estimate(cfg, (1, 1), TotalQueueLength(), 2.0, 500, 11).value, rel=1e-12)
    assert math.isfinite(a.standard_error)


def test_router_is_quiet_on_stable_configs():
    cfg = ModelConfig(2, 1.0, (1.0, 2.0), (0.5, 0.5), 2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        simulate(cfg, SimPlan(warmup_time=0.0, measure_time=10.0, replications=2))
