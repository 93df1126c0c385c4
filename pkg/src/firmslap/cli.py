"""Command-line front end.

Subcommands: ``build`` constructs a roadmap over an environment file and
writes it plus a construction report; ``run`` replays one scenario under a
chosen policy and logs the run; ``compare`` runs a matched-seed batch over
several policies and emits summary/curve CSVs; ``fixtures`` writes the
bundled reference environments; ``serve`` hosts a live run behind the
websocket bridge.

Exit codes: 0 success, 2 configuration error, 3 construction error,
4 run failure (collision or timeout; logs are still written).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExecConfig, PlannerConfig
from .control import PlanningError
from .estimation import (DegenerateNoiseError, UnobservableNodeError,
                         riccati_map)
from .executor import Scenario, ScenarioFormatError, run_scenario
from .fixtures import write_fixtures
from .graph import (ConstructionError, DPConvergenceError, FirmGraph,
                    GraphFormatError, build_graph, load_graph, sample_nodes,
                    save_graph, solve_dp)
from .metrics import (batch_compare, format_summary, write_curve_csv,
                      write_runs_csv, write_summary_csv)
from .world import EnvironmentFormatError, load_environment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONSTRUCTION = 3
EXIT_RUN_FAILURE = 4


def max_dare_residual(graph: FirmGraph) -> float:
    """Largest fixed-point residual of any node's stationary covariance."""
    worst = 0.0
    for node in graph.nodes.values():
        nf = node.nf
        s = nf.system
        gqgt = s.G @ s.Q @ s.G.T
        r = np.linalg.norm(riccati_map(nf.P_minus, s.A, gqgt, s.H, s.R)
                           - nf.P_minus, ord="fro")
        worst = max(worst, float(r))
    return worst


def _exec_config(args: argparse.Namespace, policy: str) -> ExecConfig:
    """ExecConfig from CLI overrides; unset flags keep dataclass defaults."""
    kw: dict = {"policy": policy}
    for flag, field in (("r_max", "r_max"), ("t_rollout", "t_rollout"),
                        ("rollout_radius", "rollout_radius"),
                        ("max_ticks", "max_ticks")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[field] = v
    return ExecConfig(**kw)


def _planner_config(graph: FirmGraph, args: argparse.Namespace) -> PlannerConfig:
    cfg = graph.cfg
    mc_online = getattr(args, "mc_online", None)
    if mc_online is not None:
        from dataclasses import replace
        cfg = replace(cfg, n_mc_online=mc_online)
    return cfg


def _check_reachable(graph: FirmGraph, scenario: Scenario) -> None:
    start = graph.nearest_node(scenario.start[:2])
    goal = graph.nearest_node(scenario.goals[0][:2])
    policy = solve_dp(graph, goal)
    if start != goal and policy.cost_to_go[start] >= graph.cfg.j_fail:
        raise ConstructionError(
            f"goal node {goal} unreachable from start node {start}")


def cmd_build(args: argparse.Namespace) -> int:
    world = load_environment(args.environment)
    pcfg = PlannerConfig(
        k_neighbors=args.k if args.k is not None else PlannerConfig.k_neighbors,
        n_mc=args.mc if args.mc is not None else PlannerConfig.n_mc,
        workers=args.workers)
    points = sample_nodes(world, args.nodes, args.strategy, args.seed)
    t0 = time.time()
    graph = build_graph(world, points, pcfg, args.seed,
                        connect_radius=args.connect_radius)
    save_graph(graph, args.out)
    report = {
        "environment": str(args.environment),
        "graph": str(args.out),
        "nodes": len(graph.nodes),
        "edges": len(graph.edges),
        "offline_collision_checks": int(world.checks),
        "dare_residual_max": max_dare_residual(graph),
        "seed": args.seed,
    }
    if not args.deterministic:
        report["built_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        report["build_seconds"] = round(time.time() - t0, 3)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    graph = load_graph(args.graph)
    scenario = Scenario.load(args.scenario)
    if args.max_ticks is not None:
        scenario.max_ticks = None  # the explicit flag wins over the file
    _check_reachable(graph, scenario)
    pcfg = _planner_config(graph, args)
    ecfg = _exec_config(args, args.policy)
    record = run_scenario(graph.world, graph, scenario, pcfg, ecfg, args.seed)
    if args.log:
        record.to_jsonl(f"{args.log}.jsonl")
        record.write_rows_csv(f"{args.log}.rows.csv")
    print(json.dumps(record.summary(), indent=1, sort_keys=True))
    return EXIT_OK if record.outcome == "success" else EXIT_RUN_FAILURE


def cmd_compare(args: argparse.Namespace) -> int:
    graph = load_graph(args.graph)
    scenario = Scenario.load(args.scenario)
    if args.max_ticks is not None:
        scenario.max_ticks = None
    _check_reachable(graph, scenario)
    pcfg = _planner_config(graph, args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise ValueError("no policies given")
    ecfgs = {p: _exec_config(args, p) for p in policies}
    seeds = range(args.seed0, args.seed0 + args.runs)
    cmp = batch_compare(graph.world, graph, scenario, pcfg, ecfgs, seeds,
                        workers=args.workers)
    prefix = args.out
    write_summary_csv(f"{prefix}_summary.csv", cmp)
    write_curve_csv(f"{prefix}_cost_curves.csv", cmp, "cum_cost")
    write_curve_csv(f"{prefix}_stab_curves.csv", cmp, "stabilizations")
    write_runs_csv(f"{prefix}_runs.csv", cmp)
    print(format_summary(cmp))
    return EXIT_OK


def cmd_fixtures(args: argparse.Namespace) -> int:
    for path in write_fixtures(args.out_dir):
        print(path)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve
    graph = load_graph(args.graph)
    scenario = Scenario.load(args.scenario)
    _check_reachable(graph, scenario)
    pcfg = _planner_config(graph, args)
    ecfg = _exec_config(args, args.policy)
    serve(graph, scenario, pcfg, ecfg, seed=args.seed, host=args.host,
          port=args.port, frame_rate=args.rate, speed=args.speed)
    return EXIT_OK


def _add_exec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--r-max", dest="r_max", type=float, default=None,
                   help="filtered range-innovation threshold, m")
    p.add_argument("--t-rollout", dest="t_rollout", type=float, default=None,
                   help="sim seconds between replanning instants")
    p.add_argument("--rollout-radius", dest="rollout_radius", type=float,
                   default=None, help="candidate neighborhood radius, m")
    p.add_argument("--mc-online", dest="mc_online", type=int, default=None,
                   help="Monte-Carlo samples per online candidate")
    p.add_argument("--max-ticks", dest="max_ticks", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="firmslap",
        description="Belief-roadmap construction, execution and comparison.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="construct a roadmap over an environment")
    p.add_argument("environment", help="environment json file")
    p.add_argument("--out", required=True, help="graph json output path")
    p.add_argument("--nodes", type=int, default=49)
    p.add_argument("--strategy", choices=("grid", "uniform"), default="grid")
    p.add_argument("--k", type=int, default=None, help="neighbors per node")
    p.add_argument("--connect-radius", dest="connect_radius", type=float,
                   default=None, help="connect all nodes within this distance")
    p.add_argument("--mc", type=int, default=None,
                   help="Monte-Carlo samples per edge")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", default=None, help="also write the report here")
    p.add_argument("--deterministic", action="store_true",
                   help="omit timestamps so outputs are byte-reproducible")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("run", help="execute one scenario under one policy")
    p.add_argument("graph", help="graph json file")
    p.add_argument("scenario", help="scenario json file")
    p.add_argument("--policy", choices=("firm", "rollout"), default="rollout")
    p.add_argument("--log", default=None,
                   help="prefix for .jsonl and .rows.csv run logs")
    _add_exec_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="matched-seed batch across policies")
    p.add_argument("graph")
    p.add_argument("scenario")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--out", required=True, help="output file prefix")
    p.add_argument("--policies", default="firm,rollout")
    p.add_argument("--seed0", type=int, default=0,
                   help="first seed; seeds are seed0..seed0+runs-1")
    p.add_argument("--workers", type=int, default=1)
    _add_exec_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fixtures", help="write bundled reference environments")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("serve", help="host a live run over a websocket")
    p.add_argument("graph")
    p.add_argument("scenario")
    p.add_argument("--policy", choices=("firm", "rollout"), default="rollout")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--rate", type=float, default=10.0,
                   help="frame broadcast rate, Hz")
    p.add_argument("--speed", type=float, default=1.0,
                   help="sim-time multiplier")
    _add_exec_flags(p)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConstructionError, DPConvergenceError, UnobservableNodeError,
            DegenerateNoiseError, PlanningError) as exc:
        print(f"construction error: {exc}", file=sys.stderr)
        return EXIT_CONSTRUCTION
    except (EnvironmentFormatError, ScenarioFormatError, GraphFormatError,
            FileNotFoundError, KeyError, json.JSONDecodeError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
