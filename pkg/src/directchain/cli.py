"""Command line: run scenarios, compare modes, explore the model."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checker import BoundExceeded, ModelConfig, explore
from .simharness import (
    DEFAULTS, Mode, ScenarioError, Simulation, metrics_json, parse_scenario,
)


def _load(args):
    try:
        sc = parse_scenario(Path(args.scenario).read_text(encoding="utf-8"))
    except ScenarioError as e:
        raise SystemExit(f"{args.scenario}: {e}")
    if getattr(args, "seed", None) is not None:
        sc.seed = args.seed
    for item in args.param or ():
        key, _, value = item.partition("=")
        if key not in DEFAULTS:
            raise SystemExit(f"unknown parameter {key!r}")
        sc.params[key] = float(value) if "." in value else int(value)
    return sc


def _ok(m) -> bool:
    return m.converged and not m.violations


def cmd_run(args) -> int:
    sc = _load(args)
    if args.mode:
        sc = sc.with_mode(Mode(args.mode))
    sim = Simulation(sc, keep_trace=args.trace_out is not None)
    m = sim.run()
    sys.stdout.write(m.to_kv())
    if args.metrics_out:
        Path(args.metrics_out).write_text(metrics_json(m) + "\n", encoding="utf-8")
    if args.trace_out:
        Path(args.trace_out).write_text("\n".join(sim.trace) + "\n", encoding="utf-8")
    return 0 if _ok(m) else 1


def cmd_compare(args) -> int:
    sc = _load(args)
    if sc.fault_script:
        raise SystemExit("compare takes fault-free scenarios only")
    results = {}
    for mode in Mode:
        m = Simulation(sc.with_mode(mode)).run()
        results[mode] = m
        for line in m.to_kv().splitlines():
            print(f"{mode.value}.{line}")
    d, c = results[Mode.DIRECT], results[Mode.CENTRALIZED]
    if d.e2e_latency is not None and c.e2e_latency:
        print(f"latency_ratio={d.e2e_latency / c.e2e_latency:.4f}")
    if args.metrics_out:
        body = ",\n".join(f'"{mode.value}": {metrics_json(m)}' for mode, m in results.items())
        Path(args.metrics_out).write_text("{\n" + body + "\n}\n", encoding="utf-8")
    return 0 if all(_ok(m) for m in results.values()) else 1


def cmd_check(args) -> int:
    cmds = tuple(int(x) for x in args.cmds.split(",") if x)
    try:
        cfg = ModelConfig(num_nodes=args.nodes, scaling_cmds=cmds,
                          enable_crashes=args.enable_faults, enable_disconnects=args.enable_faults,
                          max_states=args.max_states)
    except ValueError as e:
        raise SystemExit(str(e))
    try:
        verdict = explore(cfg)
    except BoundExceeded as e:
        print(f"bound exceeded: {e}")
        return 2
    print(f"states_visited={verdict.states_visited}")
    print(f"invariant_result={verdict.invariant_result}")
    print(f"convergence_result={verdict.convergence_result}")
    for v in verdict.violated:
        print(f"violated={v}")
    if verdict.counterexample is not None and args.counterexample_out:
        Path(args.counterexample_out).write_text(verdict.to_json() + "\n", encoding="utf-8")
    return 0 if verdict.invariant_result and verdict.convergence_result else 1


def cmd_crossval(args) -> int:
    from .crossval import cross_validate, curated_scenarios
    if args.scenario:
        cases = [(args.scenario, _load(args))]
    else:
        cases = curated_scenarios()
    failed = 0
    for name, sc in cases:
        try:
            r = cross_validate(sc)
        except ScenarioError as e:
            print(f"{name}: not expressible in the model: {e}")
            failed += 1
            continue
        if r:
            print(f"{name}: consistent ({r.steps} steps, {r.model_actions} model actions)")
        else:
            failed += 1
            print(f"{name}: divergent, {r.describe()}")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="directchain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("scenario")
    r.add_argument("--mode", choices=[m.value for m in Mode])
    r.add_argument("--seed", type=int)
    r.add_argument("--metrics-out")
    r.add_argument("--trace-out")
    r.add_argument("--param", action="append", metavar="KEY=VALUE", help="override a run parameter")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run a fault-free scenario in both modes")
    c.add_argument("scenario")
    c.add_argument("--metrics-out")
    c.add_argument("--param", action="append", metavar="KEY=VALUE")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("check", help="explore the model's state space")
    k.add_argument("--nodes", type=int, required=True)
    k.add_argument("--cmds", required=True, help="comma-separated, strictly increasing")
    k.add_argument("--enable-faults", action="store_true")
    k.add_argument("--max-states", type=int, default=5_000_000)
    k.add_argument("--counterexample-out")
    k.set_defaults(func=cmd_check)

    x = sub.add_parser("crossval", help="check simulator runs against the model")
    x.add_argument("scenario", nargs="?", help="scenario file; the curated set when omitted")
    x.add_argument("--param", action="append", metavar="KEY=VALUE")
    x.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
