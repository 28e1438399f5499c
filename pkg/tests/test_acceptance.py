"""Acceptance checks, one per criterion.

Each check prints a single ``PASS``/``FAIL`` line with the measured numbers
and its wall time, then asserts. Run standalone for the summary only::

    python3 tests/test_acceptance.py
"""
import json
import math
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from oracles import enumerate_rank_law, theta_quadrature  # noqa: E402

from hetsim import (  # noqa: E402
    Constant,
    DiscountParams,
    HorizonParams,
    ModelConfig,
    RMax,
    RMin,
    SimPlan,
    TotalQueueLength,
    Weighted,
    build_generator,
    discounted_expected_reward,
    expected_reward_discounted,
    expected_reward_finite,
    mc_reward_estimate,
    preset_config,
    rank_probabilities,
    rank_selection_fraction,
    run_experiment,
    simulate,
    stationary_distribution,
    theta_k,
    transient_expected_reward,
)
from hetsim.cli import main as cli_main  # noqa: E402
from hetsim.presets import Preset  # noqa: E402
from hetsim.reward import theta_sequence  # noqa: E402

_LINES = []


def _emit(line):
    _LINES.append(line)
    print(line)


@contextmanager
def criterion(number, title, limit_s):
    """Time a block; it must set ``box["ok"]`` and ``box["detail"]``."""
    box = {"ok": False, "detail": "not evaluated"}
    t0 = time.perf_counter()
    try:
        yield box
    finally:
        dt = time.perf_counter() - t0
        in_time = dt < limit_s
        ok = bool(box["ok"]) and in_time
        timing = f"{dt:.1f}s < {limit_s:g}s" if in_time else f"{dt:.1f}s EXCEEDS {limit_s:g}s"
        _emit(f"[{'PASS' if ok else 'FAIL'}] criterion {number} ({title}): {box['detail']} [{timing}]")
        box["final"] = ok
    assert box["final"], box["detail"]


def test_criterion_1_rank_law_exactness():
    with criterion(1, "rank law exactness", 1.0) as box:
        checked, worst_sum = 0, 0.0
        exact = True
        for M in range(1, 9):
            for d in range(1, M + 1):
                expect = enumerate_rank_law(M, d)
                got = [rank_selection_fraction(M, i, d) for i in range(1, M + 1)]
                exact &= got == expect
                worst_sum = max(worst_sum, abs(math.fsum(rank_probabilities(M, d)) - 1.0))
                exact &= all(float(f) == pytest.approx(float(e), rel=1e-15, abs=0)
                             for f, e in zip(rank_probabilities(M, d), expect))
                checked += 1
        box["ok"] = exact and worst_sum <= 1e-12
        box["detail"] = f"{checked} (M, d) pairs equal subset enumeration: {exact}; max |sum-1| = {worst_sum:.1e}"


def _random_config(rng):
    M = int(rng.integers(1, 4))
    mu = tuple(rng.uniform(0.5, 2.0, M))
    g = tuple(rng.dirichlet(np.ones(M)))
    sel = Weighted(*rng.dirichlet(np.ones(3))) if rng.random() < 0.3 else None
    kw = {"selection": sel} if sel is not None else {}
    cfg = ModelConfig(M, float(rng.uniform(0.3, 2.0)), mu, g, int(rng.integers(1, M + 1)),
                      routing_basis=str(rng.choice(["system", "waiting"])), **kw)
    x0 = tuple(int(v) for v in rng.integers(0, 3, M))
    return cfg, x0


def test_criterion_2_constant_reward_identities():
    with criterion(2, "constant-reward identities", 10.0) as box:
        rng = np.random.default_rng(20)
        worst_f = worst_d = 0.0
        for _ in range(20):
            cfg, x0 = _random_config(rng)
            # the discounted tail bound is absolute (epsilon_tail), so the relative
            # error scales like epsilon_tail * beta / |c|; keep |c| away from zero
            c = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 5.0))
            t = float(rng.uniform(0.5, 3.0))
            beta = float(rng.uniform(0.5, 2.0))
            f = expected_reward_finite(cfg, x0, Constant(c), HorizonParams(t=t)).value
            d = expected_reward_discounted(cfg, x0, Constant(c), DiscountParams(beta=beta)).value
            worst_f = max(worst_f, abs(f - c * t) / abs(c * t))
            worst_d = max(worst_d, abs(d - c / beta) / abs(c / beta))
        box["ok"] = worst_f < 1e-8 and worst_d < 1e-8
        box["detail"] = f"20 configs, max rel err finite {worst_f:.1e}, discounted {worst_d:.1e} (tol 1e-8)"


def test_criterion_3_triple_agreement():
    with criterion(3, "tree / oracle / Monte Carlo agreement", 300.0) as box:
        rng = np.random.default_rng(3)
        worst = 0.0
        failures = []
        t, x0, paths = 1.0, (1, 0), 20_000
        for n in range(5):
            mu = tuple(rng.uniform(1.0, 2.0, 2))
            g = tuple(rng.dirichlet((2, 2)))
            cfg = ModelConfig(2, float(rng.uniform(0.2, 0.6)), mu, g, int(rng.integers(1, 3)))
            G = build_generator(cfg, 6)
            for spec in (RMin(), RMax(), TotalQueueLength()):
                tree = expected_reward_finite(cfg, x0, spec, HorizonParams(t=t))
                ora = transient_expected_reward(G, x0, spec, t)
                mc = mc_reward_estimate(cfg, x0, spec, t, paths, seed=n)
                pairs = {
                    "tree-oracle": (abs(tree.value - ora), max(1e-3, tree.truncation_error_bound)),
                    "tree-mc": (abs(tree.value - mc.value), max(1e-3, 3 * mc.standard_error)),
                    "oracle-mc": (abs(ora - mc.value), max(1e-3, 3 * mc.standard_error)),
                }
                for name, (diff, tol) in pairs.items():
                    worst = max(worst, diff / tol)
                    if diff > tol:
                        failures.append(f"cfg{n} {spec.name} {name} {diff:.2e}>{tol:.2e}")
        box["ok"] = not failures
        box["detail"] = (f"5 configs x 3 rewards, worst diff/tolerance = {worst:.2f}"
                         + (f"; failures: {failures}" if failures else ""))


def test_criterion_4_theta_sequence():
    with criterion(4, "theta sequence", 5.0) as box:
        grid = [(w, b) for w in (0.5, 2.0, 7.0) for b in (0.2, 1.0, 3.0)]
        worst = 0.0
        for w, b in grid:
            for k in range(21):
                worst = max(worst, abs(theta_k(w, b, k) - theta_quadrature(w, b, k)))
        geo = 0.0
        for w, b in grid:
            q = w / (w + b)
            th = theta_sequence(w, b, 60)
            for K in (0, 5, 20, 60):
                resid = 1 / b - math.fsum(th[: K + 1])
                geo = max(geo, abs(resid - q ** (K + 1) / b) * b)
        box["ok"] = worst < 1e-8 and geo < 1e-12
        box["detail"] = (f"{len(grid)} (omega, beta) pairs, k<=20: max |closed form - quadrature| = {worst:.1e}; "
                         f"|1/beta - partial sum - q^(K+1)/beta| * beta <= {geo:.1e}")


def test_criterion_5_mm1_embedding():
    with criterion(5, "M/M/1 embedding", 60.0) as box:
        cfg = ModelConfig(1, 1.0, (2.0,), (1.0,), 1)
        st = simulate(cfg, SimPlan(warmup_time=1_000.0, measure_time=100_000.0, replications=30, seed=5))
        sim_mean = float(st.per_server_mean_queue_length[0])
        G = build_generator(cfg, 60)
        ora_mean = float(stationary_distribution(G).mean_queue_lengths[0])
        series = expected_reward_discounted(cfg, (0,), TotalQueueLength(), DiscountParams(beta=1.0)).value
        resolvent = discounted_expected_reward(G, (0,), TotalQueueLength(), 1.0)
        box["ok"] = abs(sim_mean - 1) <= 0.01 and abs(ora_mean - 1) <= 0.01 and abs(series - resolvent) <= 1e-3
        box["detail"] = (f"simulated L = {sim_mean:.4f} (ci {st.per_server_ci_halfwidth[0]:.4f}), "
                         f"stationary L = {ora_mean:.6f}, discounted series {series:.6f} vs resolvent {resolvent:.6f}")


def test_criterion_6_published_tables():
    with criterion(6, "published experiment tables", 600.0) as box:
        parts, ok = [], True
        for p in Preset:
            res = run_experiment(p, SimPlan(seed=2024))
            within, rho = res.servers_within(0.15), res.spearman
            ok &= within >= 8 and rho >= 0.85
            sim = res.simulated
            parts.append(f"{p.value}: {within}/10 within 0.15, spearman {rho:.3f}")
            if p is Preset.ONE:
                parts.append(f"anchor one s1 {sim[0]:.4f} vs 0.6834")
            elif p is Preset.TWO:
                parts.append(f"anchor two s1 {sim[0]:.4f} vs 0.3459")
            else:
                parts.append(f"anchor three s3 {sim[2]:.4f} vs 0.8598")
        box["ok"] = ok
        box["detail"] = "; ".join(parts) + " (waiting-count basis)"


def test_criterion_7_power_of_d():
    with criterion(7, "power of d", 600.0) as box:
        plan = SimPlan(warmup_time=1_000.0, measure_time=10_000.0, replications=20, seed=7)
        out = {}
        for basis in ("system", "waiting"):
            base = preset_config(Preset.ONE, routing_basis=basis)
            out[basis] = [simulate(base.replace(d=d), plan) for d in (1, 2, 3)]
        ok = True
        parts = []
        for basis, runs in out.items():
            m = [r.total_mean for r in runs]
            h = [r.total_ci_halfwidth for r in runs]
            for i in range(2):
                ok &= m[i + 1] <= m[i] + h[i] + h[i + 1]
            parts.append(f"{basis}: " + ", ".join(f"d={d} {mm:.3f}±{hh:.3f}" for d, mm, hh in zip((1, 2, 3), m, h)))
        box["ok"] = ok
        box["detail"] = "total mean queue length " + "; ".join(parts)


def test_criterion_8_cli_reproducibility(tmp_path):
    with criterion(8, "bit-identical CLI reports", 120.0) as box:
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"M": 3, "lambda": 1.5, "mu": [1.0, 1.2, 0.9], "g": [0.3, 0.3, 0.4], "d": 2}))
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([json.loads(cfg.read_text()) | {"d": d} for d in (1, 2)]))
        runs = [
            ["simulate", "--config", cfg, "--seed", 9, "--replications", 3, "--warmup", 10, "--measure", 300],
            ["reward", "--config", cfg, "--mode", "finite", "--t", 2, "--reward", "rmin", "--node-budget", 5000],
            ["reward", "--config", cfg, "--mode", "discounted", "--beta", 1, "--reward", "total", "--compare-oracle"],
            ["oracle", "--config", cfg, "--buffer", 5, "--t", 1],
            ["design", "--grid", grid, "--beta", 1.0, "--node-budget", 20000],
            ["experiment", "--preset", "two", "--replications", 2, "--warmup", 5, "--measure", 50],
        ]
        compared, differing = 0, []
        for i, argv in enumerate(runs):
            for rep in ("a", "b"):
                rc = cli_main([str(a) for a in argv] + ["--out", str(tmp_path / rep), "--name", f"run{i}"])
                if rc != 0:
                    differing.append(f"run{i} exit {rc}")
        for f in sorted((tmp_path / "a").iterdir()):
            if f.name.endswith(".timing.json"):
                continue
            compared += 1
            if f.read_bytes() != (tmp_path / "b" / f.name).read_bytes():
                differing.append(f.name)
        box["ok"] = compared > 0 and not differing
        box["detail"] = f"{len(runs)} commands run twice, {compared} report files compared, differing: {differing or 'none'}"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
