"""Batch comparison and collision-check accounting.

batch_compare executes the same scenario under several policy kinds with
matched seeds (the noise substreams depend only on the seed, so differences
between policies are attributable to the policy alone), aggregates per-seed
outcome tables, and emits mean cumulative-cost and stabilization curves on a
common tick grid with seed-bootstrap confidence intervals.  Runs fan out
across forked worker processes; aggregation stays in the parent.

complexity_bound_check evaluates a closed-form ceiling on believed-map
collision checks per replanning instant for grid-sampled roadmaps
(n_b * dt^-1 * w^-d * R^(d+1) * N  -  n_b * dt^-1 * w^-1 * R^2 * N^(1/d))
and compares it against measured per-instant counts from run logs.
"""

from __future__ import annotations

import csv
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExecConfig, PlannerConfig
from .executor import RunRecord, Scenario, run_scenario
from .graph import FirmGraph
from .world import WorldModel

CURVE_BUCKET = 10  # ticks per curve sample


# --- complexity accounting ---------------------------------------------------


@dataclass
class ComplexityCounters:
    """Collision-check and sampling counters for one build plus its runs."""

    offline_collision_checks: int = 0
    online_checks_per_instant: list = field(default_factory=list)
    edges_built: int = 0
    mc_samples_used: int = 0

    @staticmethod
    def from_build(world: WorldModel, graph: FirmGraph) -> "ComplexityCounters":
        c = ComplexityCounters()
        c.offline_collision_checks = int(world.checks)
        c.edges_built = len(graph.edges)
        c.mc_samples_used = sum(e.stats.sample_count for e in graph.edges.values()
                                if e.stats is not None)
        return c

    def add_run(self, record: RunRecord) -> None:
        for d in record.decisions:
            if "collision_checks" in d:
                self.online_checks_per_instant.append(int(d["collision_checks"]))


def complexity_bound(N: int, R: float, w: float, d: int,
                     n_b: int, dt: float) -> float:
    """Ceiling on believed-map collision checks per replanning instant.

    N roadmap nodes on a grid over a w-wide workspace of dimension d, with
    candidate radius R, n_b Monte-Carlo particles per candidate and control
    period dt.  The second term removes the checks the current edge would
    have spent anyway, so the bound can be negative for tiny R.
    """
    full = n_b * (1.0 / dt) * w ** (-d) * R ** (d + 1) * N
    base = n_b * (1.0 / dt) * (1.0 / w) * R ** 2 * N ** (1.0 / d)
    return full - base


def complexity_bound_check(counters: ComplexityCounters, N: int, R: float,
                           w: float, d: int, n_b: int, dt: float) -> dict:
    """Compare measured per-instant check counts against the closed form."""
    bound = complexity_bound(N, R, w, d, n_b, dt)
    counts = np.asarray(counters.online_checks_per_instant, dtype=float)
    measured_mean = float(counts.mean()) if counts.size else 0.0
    measured_max = float(counts.max()) if counts.size else 0.0
    return {"bound": float(bound),
            "measured_mean": measured_mean,
            "measured_max": measured_max,
            "instants": int(counts.size),
            "ratio": measured_mean / bound if bound > 0 else float("inf"),
            "ok": measured_mean <= bound}


# --- batch comparison --------------------------------------------------------


@dataclass
class BatchSummary:
    """Per-seed table plus aggregate statistics for one policy kind."""

    policy: str
    seeds: list
    outcomes: list
    total_costs: np.ndarray
    ticks: np.ndarray
    stabilizations: np.ndarray
    mean_cost: float = 0.0
    mean_ticks: float = 0.0
    mean_stabilizations: float = 0.0
    ci_cost: tuple = (0.0, 0.0)
    ci_ticks: tuple = (0.0, 0.0)
    ci_stabilizations: tuple = (0.0, 0.0)

    def finalize(self, n_boot: int = 1000) -> "BatchSummary":
        self.mean_cost = float(self.total_costs.mean())
        self.mean_ticks = float(self.ticks.mean())
        self.mean_stabilizations = float(self.stabilizations.mean())
        self.ci_cost = bootstrap_ci(self.total_costs, n_boot)
        self.ci_ticks = bootstrap_ci(self.ticks, n_boot)
        self.ci_stabilizations = bootstrap_ci(self.stabilizations, n_boot)
        return self

    def success_rate(self) -> float:
        return sum(1 for o in self.outcomes if o == "success") / len(self.outcomes)


@dataclass
class BatchComparison:
    """Everything batch_compare produces, ready for CSV emission."""

    summaries: dict                # policy -> BatchSummary
    curve_ticks: np.ndarray        # common bucketed tick grid
    cost_curves: dict              # policy -> (n_seeds, n_buckets)
    stab_curves: dict              # policy -> (n_seeds, n_buckets)
    decisions: dict                # policy -> list of decision dicts (all seeds)
    records: dict | None = None    # policy -> {seed: RunRecord} when retained

    def mean_cost_curve(self, policy: str) -> np.ndarray:
        return self.cost_curves[policy].mean(axis=0)

    def mean_stab_curve(self, policy: str) -> np.ndarray:
        return self.stab_curves[policy].mean(axis=0)


def bootstrap_ci(values: np.ndarray, n_boot: int = 1000,
                 level: float = 0.95, seed: int = 0) -> tuple:
    """Percentile bootstrap interval for the mean, resampling runs."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return (0.0, 0.0)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [50 * (1 - level), 100 - 50 * (1 - level)])
    return (float(lo), float(hi))


def _extract_curves(record: RunRecord, bucket: int) -> tuple:
    """Downsample one run to (bucket_ticks, cum_cost, stab_count) arrays."""
    rows = record.rows
    last = int(rows[-1, 0]) if len(rows) else 0
    grid = np.arange(0, last + bucket, bucket)
    cum = np.interp(grid, rows[:, 0], rows[:, 9]) if len(rows) else np.zeros_like(grid, dtype=float)
    stab_ticks = np.sort([e["tick"] for e in record.events
                          if e.get("kind") == "stabilized"])
    stab = np.searchsorted(stab_ticks, grid, side="right").astype(float)
    return grid, cum, stab


_BATCH_STATE: dict = {}


def _run_one_seed(args) -> dict:
    seed, bucket, keep = args
    st = _BATCH_STATE
    out = {"seed": seed, "policies": {}}
    for policy in st["policies"]:
        ecfg = st["ecfgs"][policy]
        rec = run_scenario(st["world"], st["graph"], st["scenario"],
                           st["pcfg"], ecfg, seed)
        grid, cum, stab = _extract_curves(rec, bucket)
        out["policies"][policy] = {
            "summary": rec.summary(),
            "grid": grid, "cum": cum, "stab": stab,
            "decisions": rec.decisions,
            "record": rec if keep else None,
        }
    return out


def batch_compare(world: WorldModel, graph: FirmGraph, scenario: Scenario,
                  pcfg: PlannerConfig, ecfgs: dict, seeds,
                  workers: int = 1, bucket: int = CURVE_BUCKET,
                  keep_records: bool = False) -> BatchComparison:
    """Run every seed under every policy and aggregate.

    ecfgs maps policy name -> ExecConfig (its .policy field wins); seeds are
    shared across policies so noise streams match.  With workers > 1 the
    seeds fan out over forked processes; results are deterministic either
    way because every run draws from seed-keyed substreams only.
    """
    policies = list(ecfgs.keys())
    for name, e in ecfgs.items():
        if e.policy != name:
            raise ValueError(f"ecfgs[{name!r}].policy is {e.policy!r}")
    seeds = [int(s) for s in seeds]

    global _BATCH_STATE
    _BATCH_STATE = {"world": world, "graph": graph, "scenario": scenario,
                    "pcfg": pcfg, "ecfgs": ecfgs, "policies": policies}
    jobs = [(s, bucket, keep_records) for s in seeds]
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_one_seed, jobs))
        else:
            results = [_run_one_seed(j) for j in jobs]
    finally:
        _BATCH_STATE = {}

    n_buckets = max(len(r["policies"][p]["grid"])
                    for r in results for p in policies)
    curve_ticks = np.arange(n_buckets) * bucket

    summaries, cost_curves, stab_curves, decisions = {}, {}, {}, {}
    records: dict = {p: {} for p in policies} if keep_records else None
    for policy in policies:
        cost = np.zeros((len(seeds), n_buckets))
        stab = np.zeros((len(seeds), n_buckets))
        outs, costs_end, ticks_end, stabs_end, decs = [], [], [], [], []
        for i, r in enumerate(results):
            d = r["policies"][policy]
            m = len(d["grid"])
            cost[i, :m] = d["cum"]
            cost[i, m:] = d["cum"][-1] if m else 0.0
            stab[i, :m] = d["stab"]
            stab[i, m:] = d["stab"][-1] if m else 0.0
            s = d["summary"]
            outs.append(s["outcome"])
            costs_end.append(s["total_cost"])
            ticks_end.append(s["ticks"])
            stabs_end.append(s["stabilizations"])
            decs.extend(d["decisions"])
            if keep_records:
                records[policy][r["seed"]] = d["record"]
        summaries[policy] = BatchSummary(
            policy, list(seeds), outs, np.array(costs_end, dtype=float),
            np.array(ticks_end, dtype=float), np.array(stabs_end, dtype=float),
        ).finalize()
        cost_curves[policy] = cost
        stab_curves[policy] = stab
        decisions[policy] = decs

    return BatchComparison(summaries, curve_ticks, cost_curves, stab_curves,
                           decisions, records)


# --- emission ----------------------------------------------------------------


def write_curve_csv(path, cmp: BatchComparison, field: str) -> None:
    """One row per (policy, seed, tick bucket) for a single curve family.

    field selects which curve to emit: "cum_cost" or "stabilizations".
    """
    curves = {"cum_cost": cmp.cost_curves,
              "stabilizations": cmp.stab_curves}[field]
    fmt = (lambda v: f"{v:.6f}") if field == "cum_cost" else (lambda v: str(int(v)))
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["policy", "seed", "tick", field])
        for policy, arr in curves.items():
            seeds = cmp.summaries[policy].seeds
            for i, seed in enumerate(seeds):
                for j, t in enumerate(cmp.curve_ticks):
                    wr.writerow([policy, seed, int(t), fmt(arr[i, j])])


def write_runs_csv(path, cmp: BatchComparison) -> None:
    """Per-run detail: one row per (policy, seed)."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["policy", "seed", "outcome", "total_cost", "ticks",
                     "stabilizations"])
        for policy, s in cmp.summaries.items():
            for i, seed in enumerate(s.seeds):
                wr.writerow([policy, seed, s.outcomes[i],
                             f"{s.total_costs[i]:.6f}", int(s.ticks[i]),
                             int(s.stabilizations[i])])


def write_summary_csv(path, cmp: BatchComparison) -> None:
    """Aggregate table: exactly one row per policy."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["policy", "runs", "success_rate", "mean_cost",
                     "ci_cost_lo", "ci_cost_hi", "mean_ticks",
                     "mean_stabilizations"])
        for policy, s in cmp.summaries.items():
            wr.writerow([policy, len(s.seeds), f"{s.success_rate():.4f}",
                         f"{s.mean_cost:.6f}", f"{s.ci_cost[0]:.6f}",
                         f"{s.ci_cost[1]:.6f}", f"{s.mean_ticks:.2f}",
                         f"{s.mean_stabilizations:.2f}"])


def format_summary(cmp: BatchComparison) -> str:
    """Aligned aggregate table, one line per policy."""
    lines = [f"{'policy':<10}{'runs':>6}{'success':>9}{'cost':>12}"
             f"{'ticks':>10}{'stabil.':>9}   95% CI cost"]
    for policy, s in cmp.summaries.items():
        lines.append(
            f"{policy:<10}{len(s.seeds):>6}{s.success_rate():>9.2f}"
            f"{s.mean_cost:>12.1f}{s.mean_ticks:>10.1f}"
            f"{s.mean_stabilizations:>9.1f}   "
            f"[{s.ci_cost[0]:.1f}, {s.ci_cost[1]:.1f}]")
    return "\n".join(lines)
