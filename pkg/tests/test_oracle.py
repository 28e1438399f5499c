import numpy as np
import pytest
from oracles import mm1_mean_queue_length

from hetsim import (
    CapacityError,
    ConfigurationError,
    Constant,
    DiscountParams,
    ModelConfig,
    RMax,
    RMin,
    StructuralError,
    TotalQueueLength,
    build_generator,
    discounted_expected_reward,
    expected_reward_discounted,
    stationary_distribution,
    transient_expected_reward,
)
from hetsim.oracle import TruncatedSpace


def mm1(lam=1.0, mu=2.0):
    return ModelConfig(1, lam, (mu,), (1.0,), 1)


def test_birth_death_generator():
    G = build_generator(mm1(0.7, 1.9), 3)
    expect = np.array([
        [-0.7, 0.7, 0, 0],
        [1.9, -2.6, 0.7, 0],
        [0, 1.9, -2.6, 0.7],
        [0, 0, 1.9, -1.9],
    ])
    np.testing.assert_allclose(G.Q.toarray(), expect, atol=1e-15)
    np.testing.assert_allclose(G.blocked_rate, [0, 0, 0, 0.7])


@pytest.mark.parametrize("d", [1, 2, 3])
def test_rows_sum_to_zero(d):
    cfg = ModelConfig(3, 2.0, (1.0, 1.5, 0.5), (0.2, 0.5, 0.3), d)
    G = build_generator(cfg, 4)
    np.testing.assert_allclose(np.asarray(G.Q.sum(axis=1)).ravel(), 0.0, atol=1e-10)


def test_symmetric_tie_splits_arrivals():
    cfg = ModelConfig(2, 1.2, (1.0, 1.0), (0.5, 0.5), 2)
    G = build_generator(cfg, 5)
    for c in range(5):
        i = G.space.index((c, c))
        assert G.Q[i, G.space.index((c + 1, c))] == pytest.approx(0.6)
        assert G.Q[i, G.space.index((c, c + 1))] == pytest.approx(0.6)


def test_index_tie_mode_sends_ties_to_lowest_server():
    cfg = ModelConfig(2, 1.2, (1.0, 1.0), (0.5, 0.5), 2)
    G = build_generator(cfg, 5, tie_mode="index")
    i = G.space.index((1, 1))
    assert G.Q[i, G.space.index((2, 1))] == pytest.approx(1.2)


def test_state_cap():
    cfg = ModelConfig(4, 1.0, (1.0,) * 4, (0.25,) * 4, 2)
    with pytest.raises(CapacityError):
        build_generator(cfg, 20, state_cap=1000)


def test_space_indexing_roundtrip():
    sp = TruncatedSpace(3, 4)
    for i in (0, 7, 63, sp.size - 1):
        assert sp.index(sp.state(i)) == i
    with pytest.raises(ConfigurationError):
        sp.index((5, 0, 0))


# -- transient --------------------------------------------------------------


@pytest.mark.parametrize("method", ["uniformization", "expm"])
def test_transient_constant(method):
    cfg = ModelConfig(2, 0.9, (1.0, 2.0), (0.5, 0.5), 2)
    G = build_generator(cfg, 6)
    assert transient_expected_reward(G, (1, 1), Constant(3.0), 2.5, method=method) == pytest.approx(7.5, abs=1e-9)


def test_transient_small_t_limit():
    cfg = ModelConfig(2, 0.9, (1.0, 2.0), (0.5, 0.5), 2)
    G = build_generator(cfg, 6)
    t = 1e-6
    v = transient_expected_reward(G, (2, 1), RMax(), t)
    assert v / t == pytest.approx(RMax()(cfg, (2, 1)), abs=1e-6)


def test_transient_methods_agree():
    cfg = ModelConfig(2, 1.4, (1.0, 2.0), (0.3, 0.7), 1)
    G = build_generator(cfg, 8)
    a = transient_expected_reward(G, (0, 3), TotalQueueLength(), 4.0)
    b = transient_expected_reward(G, (0, 3), TotalQueueLength(), 4.0, method="expm")
    assert a == pytest.approx(b, rel=1e-9)


def test_transient_long_run_mm1():
    cfg = mm1(1.0, 2.0)
    G = build_generator(cfg, 60)
    t = 2000.0
    v = transient_expected_reward(G, (0,), TotalQueueLength(), t, method="expm")
    assert v / t == pytest.approx(mm1_mean_queue_length(1.0, 2.0), rel=0.01)


def test_series_budget():
    G = build_generator(mm1(), 10)
    with pytest.raises(CapacityError, match="expm"):
        transient_expected_reward(G, (0,), Constant(1.0), 1e6, series_budget=1000)


# -- discounted -------------------------------------------------------------


def test_discounted_constant_and_bounds():
    cfg = ModelConfig(2, 0.9, (1.0, 2.0), (0.5, 0.5), 2)
    G = build_generator(cfg, 6)
    assert discounted_expected_reward(G, (0, 0), Constant(2.0), 0.5) == pytest.approx(4.0, abs=1e-9)
    r = G.reward_vector(RMin())
    v = discounted_expected_reward(G, (3, 1), RMin(), 0.7)
    assert r.min() / 0.7 - 1e-12 <= v <= r.max() / 0.7 + 1e-12


def test_discounted_rejects_bad_beta():
    G = build_generator(mm1(), 4)
    with pytest.raises(ConfigurationError):
        discounted_expected_reward(G, (0,), Constant(1.0), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_discounted_matches_series_on_random_two_server_models(seed):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.8, 2.0, 2)
    g = rng.dirichlet((2, 2))
    cfg = ModelConfig(2, float(rng.uniform(0.2, 0.6)), tuple(mu), tuple(g), int(rng.integers(1, 3)))
    G = build_generator(cfg, 6)
    x0 = (1, 0)
    for spec in (RMin(), RMax()):
        est = expected_reward_discounted(cfg, x0, spec, DiscountParams(beta=2.0))
        ref = discounted_expected_reward(G, x0, spec, 2.0)
        assert est.value == pytest.approx(ref, abs=1e-4)


# -- stationary -------------------------------------------------------------


def test_mm1_stationary_mean():
    st = stationary_distribution(build_generator(mm1(1.0, 2.0), 60))
    assert st.mean_queue_lengths[0] == pytest.approx(1.0, abs=1e-4)
    assert st.blocking_probability < 1e-15


def test_symmetric_stationary_is_swap_invariant():
    cfg = ModelConfig(2, 1.5, (1.2, 1.2), (0.5, 0.5), 2)
    G = build_generator(cfg, 12)
    st = stationary_distribution(G)
    assert st.pi.min() >= 0
    assert st.pi.sum() == pytest.approx(1.0, abs=1e-12)
    assert st.mean_queue_lengths[0] == pytest.approx(st.mean_queue_lengths[1], abs=1e-10)
    sp = G.space
    swapped = np.array([st.pi[sp.index(x[::-1])] for x in sp.states])
    np.testing.assert_allclose(swapped, st.pi, atol=1e-12)


def test_transient_states_carry_no_mass():
    # d = M: the worse queue is never joined, so states where it is the
    # only one full are transient
    cfg = ModelConfig(2, 0.8, (1.5, 2.0), (0.4, 0.6), 2)
    st = stationary_distribution(build_generator(cfg, 6))
    assert st.pi.sum() == pytest.approx(1.0)


def test_two_closed_classes_is_structural_error():
    import scipy.sparse as sp

    from hetsim.oracle import GeneratorMatrix

    G = build_generator(mm1(), 3)
    Q = sp.csr_matrix(np.zeros((4, 4)))
    broken = GeneratorMatrix(G.cfg, G.space, Q, G.blocked_rate, G.tie_mode)
    with pytest.raises(StructuralError):
        stationary_distribution(broken)
