"""``hetsim`` command-line interface.

Every command writes ``<name>.json`` (report with an embedded run manifest)
and, where tabular, ``<name>.csv`` into ``--out``. Wall-clock time goes to a
separate ``<name>.timing.json`` so the reports themselves are reproducible
byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigurationError, HetsimError
from .model import ModelConfig, check_state
from .oracle import build_generator, discounted_expected_reward, stationary_distribution, transient_expected_reward
from .presets import PAPER_BASIS, Preset, parse_preset, preset_config, run_experiment
from .reward import (
    DiscountParams,
    HorizonParams,
    evaluate_design_criteria,
    expected_reward_discounted,
    expected_reward_finite,
    parse_reward,
)
from .sim import SimPlan, simulate
from .streams import GENERATOR_ID

SCHEMA_VERSION = 1


def load_config(path) -> ModelConfig:
    """Read a JSON model config, reporting the line of a syntax error."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return ModelConfig.from_dict(data)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def dump_config(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def _parse_state(text, cfg):
    if text is None:
        return (0,) * cfg.M
    try:
        values = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"--state must be comma-separated integers, got {text!r}") from None
    return check_state(cfg, values)


def _manifest(args, cfg_dict, seed=None, truncation=None):
    return {
        "subcommand": args.command,
        "config": cfg_dict,
        "seed": seed,
        "generator": GENERATOR_ID,
        "software": f"hetsim {__version__}",
        "numpy": np.__version__,
        "truncation": truncation,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "name")},
    }


def _write(args, report: dict, csv_rows=None, csv_header=None, started=None):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or args.command
    report = {"schema_version": SCHEMA_VERSION, **report}
    (out / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n")
    if csv_rows is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# manifest", f"{name}.json"])
        w.writerow(csv_header)
        w.writerows(csv_rows)
        (out / f"{name}.csv").write_text(buf.getvalue())
    if started is not None:
        timing = {"report": f"{name}.json", "wall_clock_seconds": time.perf_counter() - started,
                  "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        (out / f"{name}.timing.json").write_text(json.dumps(timing, indent=2) + "\n")


def _fmt(v):
    return repr(float(v)) if v is not None and np.isfinite(v) else ""


def _plan(args, M):
    init = None
    if getattr(args, "state", None):
        init = tuple(int(v) for v in args.state.split(","))
        if len(init) != M:
            raise ConfigurationError(f"--state has {len(init)} entries, expected M={M}")
    return SimPlan(
        warmup_time=args.warmup, measure_time=args.measure, replications=args.replications,
        seed=args.seed, initial_state=init,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    started = time.perf_counter()
    if (args.config is None) == (args.preset is None):
        raise UsageError("give exactly one of --config or --preset")
    if args.preset:
        preset = parse_preset(args.preset)
        cfg = preset_config(preset, routing_basis=args.basis or PAPER_BASIS)
    else:
        cfg = load_config(args.config)
        if args.basis:
            cfg = cfg.replace(routing_basis=args.basis)
    plan = _plan(args, cfg.M)
    stats = simulate(cfg, plan, workers=args.workers)
    report = {"manifest": _manifest(args, cfg.to_dict(), plan.seed, {"plan": plan.to_dict()}), "results": stats.to_dict()}
    if args.preset:
        from .presets import ExperimentResult, PAPER_TABLES

        res = ExperimentResult(preset, cfg, stats, cfg.routing_basis, np.array(PAPER_TABLES[preset]))
        report["comparison"] = _comparison(res)
        print(res.table())
    rows = [
        [s + 1, _fmt(stats.per_server_mean_queue_length[s]), _fmt(stats.per_server_ci_halfwidth[s]),
         _fmt(stats.utilization[s]), _fmt(stats.per_server_mean_waiting[s]), _fmt(stats.per_server_waiting_ci_halfwidth[s])]
        for s in range(cfg.M)
    ]
    header = ["server", "mean_queue_length", "ci95_halfwidth", "utilization", "mean_waiting", "waiting_ci95_halfwidth"]
    _write(args, report, rows, header, started)
    if not args.preset:
        for r in rows:
            print(",".join(map(str, r)))
    if stats.unstable:
        print("warning: lambda >= sum(mu); time averages may not converge", file=sys.stderr)
    return 0


def _comparison(res):
    return {
        "metric": res.metric,
        "rows": [
            {"server": s, "simulated": m, "ci95_halfwidth": c if np.isfinite(c) else None, "paper": p, "abs_diff": a}
            for s, m, c, p, a in res.rows()
        ],
        "spearman": res.spearman,
        "servers_within_0.15": res.servers_within(0.15),
    }


def cmd_experiment(args):
    started = time.perf_counter()
    presets = list(Preset) if args.preset == "all" else [parse_preset(args.preset)]
    basis = args.basis or PAPER_BASIS
    results = {}
    rows = []
    for p in presets:
        res = run_experiment(p, _plan(args, 10), routing_basis=basis, workers=args.workers)
        print(f"== {p.value} (routing basis: {basis})")
        print(res.table())
        results[p.value] = {"config": res.cfg.to_dict(), "stats": res.stats.to_dict(), "comparison": _comparison(res)}
        rows.extend([p.value, s, _fmt(m), _fmt(c), _fmt(pp), _fmt(a)] for s, m, c, pp, a in res.rows())
    manifest = _manifest(args, {k: v["config"] for k, v in results.items()}, args.seed, {"plan": _plan(args, 10).to_dict()})
    _write(args, {"manifest": manifest, "results": results}, rows,
           ["preset", "server", "simulated", "ci95_halfwidth", "paper", "abs_diff"], started)
    return 0


def _reward_params(args, mode):
    if mode == "finite":
        return HorizonParams(
            t=args.t, n_max=args.n_max, k_max=args.k_max, epsilon_tail=args.epsilon,
            mc_fallback_samples=args.mc_samples, node_budget=args.node_budget, seed=args.seed,
        )
    return DiscountParams(
        beta=args.beta, k_max=args.k_max, epsilon_tail=args.epsilon,
        mc_fallback_samples=args.mc_samples, node_budget=args.node_budget, seed=args.seed,
    )


def _mode(args):
    if args.t is not None and args.beta is not None:
        raise UsageError("--t and --beta are mutually exclusive")
    mode = args.mode
    if mode is None:
        mode = "finite" if args.t is not None else "discounted" if args.beta is not None else None
    if mode == "finite" and args.t is None:
        raise UsageError("--mode finite needs --t")
    if mode == "discounted" and args.beta is None:
        raise UsageError("--mode discounted needs --beta")
    return mode


def cmd_reward(args):
    started = time.perf_counter()
    cfg = load_config(args.config)
    mode = _mode(args)
    if mode is None:
        raise UsageError("choose --mode finite --t T or --mode discounted --beta B")
    spec = parse_reward(args.reward, cfg.M)
    state = _parse_state(args.state, cfg)
    params = _reward_params(args, mode)
    if mode == "finite":
        est = expected_reward_finite(cfg, state, spec, params, paper_literal=args.paper_literal)
    else:
        est = expected_reward_discounted(cfg, state, spec, params, paper_literal=args.paper_literal)
    results = {"mode": mode, "reward": spec.name, "state": list(state), "estimate": est.to_dict()}
    print(f"value={est.value!r} bound={est.truncation_error_bound:.3e} method={est.method.value}")
    if args.compare_oracle:
        G = build_generator(cfg, args.buffer)
        if mode == "finite":
            ov = transient_expected_reward(G, state, spec, args.t)
        else:
            ov = discounted_expected_reward(G, state, spec, args.beta)
        diff = abs(ov - est.value)
        results["oracle"] = {"buffer": args.buffer, "value": ov, "abs_diff": diff}
        print(f"oracle={ov!r} abs_diff={diff:.3e}")
    truncation = {k: v for k, v in vars(params).items()}
    _write(args, {"manifest": _manifest(args, cfg.to_dict(), args.seed, truncation), "results": results}, started=started)
    return 0


def cmd_oracle(args):
    started = time.perf_counter()
    cfg = load_config(args.config)
    G = build_generator(cfg, args.buffer, tie_mode=args.tie_mode)
    st = stationary_distribution(G)
    results = {
        "buffer": args.buffer,
        "states": G.space.size,
        "stationary_mean_queue_lengths": [float(v) for v in st.mean_queue_lengths],
        "stationary_blocking_probability": st.blocking_probability,
        "stationary_residual": st.residual,
    }
    print("stationary means:", " ".join(f"{v:.6f}" for v in st.mean_queue_lengths))
    print(f"blocking probability: {st.blocking_probability:.3e}")
    if args.t is not None and args.beta is not None:
        raise UsageError("--t and --beta are mutually exclusive")
    if args.t is not None or args.beta is not None:
        spec = parse_reward(args.reward, cfg.M)
        state = _parse_state(args.state, cfg)
        if args.t is not None:
            v = transient_expected_reward(G, state, spec, args.t)
        else:
            v = discounted_expected_reward(G, state, spec, args.beta)
        results["reward"] = {"reward": spec.name, "state": list(state), "t": args.t, "beta": args.beta, "value": v}
        print(f"reward value={v!r}")
    rows = [[s + 1, _fmt(st.mean_queue_lengths[s])] for s in range(cfg.M)]
    _write(args, {"manifest": _manifest(args, cfg.to_dict(), None, {"buffer": args.buffer}), "results": results},
           rows, ["server", "stationary_mean_queue_length"], started)
    return 0


def load_grid(path) -> list[ModelConfig]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if isinstance(data, dict):
        data = data.get("candidates")
    if not isinstance(data, list):
        raise ConfigurationError(f"{path}: expected a list of configs or {{\"candidates\": [...]}}")
    cfgs = []
    for i, item in enumerate(data):
        try:
            cfgs.append(ModelConfig.from_dict(item))
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}: candidates[{i}]: {exc}") from None
    return cfgs


def cmd_design(args):
    started = time.perf_counter()
    cfgs = load_grid(args.grid)
    if not cfgs:
        raise UsageError("design grid is empty")
    if len({c.M for c in cfgs}) != 1:
        raise ConfigurationError("all candidates must share the same number of servers M")
    state = _parse_state(args.state, cfgs[0])
    params = DiscountParams(beta=args.beta, k_max=args.k_max, epsilon_tail=args.epsilon,
                            mc_fallback_samples=args.mc_samples, node_budget=args.node_budget, seed=args.seed)
    rep = evaluate_design_criteria(cfgs, state, args.beta, args.delta1, args.delta2, params)
    rows = []
    print(f"{'#':>3} {'psi_rmin':>12} {'psi_rmax':>12} {'gap':>12}")
    for i, c in enumerate(rep.candidates):
        rows.append([i, _fmt(c.psi_min.value), _fmt(c.psi_max.value), _fmt(c.gap)])
        print(f"{i:>3} {c.psi_min.value:>12.6f} {c.psi_max.value:>12.6f} {c.gap:>12.6f}")
    print(f"argmax psi(rmin)={rep.best_rmin} argmin psi(rmax)={rep.best_rmax} argmin gap={rep.best_gap}")
    print(f"criterion one: {rep.criterion_one} ({rep.criterion_one_value:.6g} < {args.delta1})")
    print(f"criterion two: {rep.criterion_two} ({rep.criterion_two_value:.6g} < {args.delta2})")
    report = rep.to_dict()
    for k in ("delta1", "delta2"):
        if not np.isfinite(report[k]):
            report[k] = str(report[k])
    manifest = _manifest(args, [c.to_dict() for c in cfgs], args.seed, vars(params))
    for k in ("delta1", "delta2"):
        if not np.isfinite(manifest["arguments"][k]):
            manifest["arguments"][k] = str(manifest["arguments"][k])
    _write(args, {"manifest": manifest, "results": report}, rows, ["candidate", "psi_rmin", "psi_rmax", "gap"], started)
    return 0


# ---------------------------------------------------------------------------
# parser


class UsageError(HetsimError):
    exit_code = 2


def _common(p):
    p.add_argument("--out", default=".", help="directory for report files")
    p.add_argument("--name", default=None, help="report file stem (default: subcommand name)")


def _sim_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=float, default=1_000.0)
    p.add_argument("--measure", type=float, default=10_000.0)
    p.add_argument("--replications", type=int, default=30)
    p.add_argument("--workers", type=int, default=None, help="worker processes (capped by HETSIM_THREADS)")
    p.add_argument("--basis", choices=("system", "waiting"), default=None,
                   help="queue lengths seen by routing and reported (presets default to 'waiting')")


def _series_flags(p):
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=1e-10, help="series tail bound")
    p.add_argument("--mc-samples", type=int, default=10_000, help="Monte Carlo paths beyond the exact tree")
    p.add_argument("--node-budget", type=int, default=5_000_000)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hetsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="discrete-event simulation of per-server queue lengths")
    p.add_argument("--config")
    p.add_argument("--preset", help="experiment-one | experiment-two | experiment-three")
    p.add_argument("--state", default=None, help="initial queue lengths, comma-separated")
    _sim_flags(p)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="rerun the published experiments against their tables")
    p.add_argument("--preset", default="all", help="one | two | three | all")
    _sim_flags(p)
    _common(p)
    p.set_defaults(func=cmd_experiment, state=None)

    p = sub.add_parser("reward", help="expected finite-horizon or discounted reward")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("finite", "discounted"))
    p.add_argument("--t", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--reward", default="rmin", help="rmin | rmax | total | queue:<i> (0-based server) | constant:<c>")
    p.add_argument("--state", default=None, help="initial queue lengths, comma-separated (default zeros)")
    p.add_argument("--n-max", type=int, default=None)
    _series_flags(p)
    p.add_argument("--paper-literal", action="store_true", help="drop idle-server self-loop mass")
    p.add_argument("--compare-oracle", action="store_true")
    p.add_argument("--buffer", type=int, default=6, help="oracle buffer cap per queue")
    _common(p)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("oracle", help="truncated-CTMC ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--buffer", type=int, default=6)
    p.add_argument("--tie-mode", choices=("average", "index"), default="average")
    p.add_argument("--t", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--reward", default="total")
    p.add_argument("--state", default=None)
    _common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("design", help="compare candidate designs by discounted r_min / r_max")
    p.add_argument("--grid", required=True, help="JSON list of configs")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--delta1", type=float, default=float("inf"))
    p.add_argument("--delta2", type=float, default=float("inf"))
    p.add_argument("--state", default=None)
    _series_flags(p)
    _common(p)
    p.set_defaults(func=cmd_design)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except HetsimError as exc:
        print(f"hetsim: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"hetsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
