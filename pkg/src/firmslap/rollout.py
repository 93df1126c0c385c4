"""Online edge re-selection from the current belief.

At a replanning instant the current belief acts as a temporary node: local
controllers are planned from it to the nearest roadmap nodes within a radius
(at most the offline neighbor count, the continuation of the current edge
always included), each is scored by short
Monte-Carlo runs against the planner's believed map, and the scan keeps the
cheapest candidate whose estimated success does not fall below the best seen.
A final guard compares the winner against the current edge so the selected
pair (value, success) is never worse than staying the course.  The temporary
node leaves no trace in the graph.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .beliefs import GaussianBelief
from .config import ExecConfig, PlannerConfig
from .control import LocalController, execute_edge, make_controller, trajectory_clear
from .graph import EdgeStats, FirmGraph, FirmPolicy
from .rng import DOMAIN_ROLLOUT_MC, substream


@dataclass(frozen=True)
class RolloutCandidate:
    """A locally planned controller toward one node, with its MC score."""

    target: int
    controller: LocalController
    stats: EdgeStats
    candidate_value: float       # mean cost + sum P(node) J(node) + P(fail) j_fail
    expected_success: float      # sum P(node) success(node)

    def as_dict(self) -> dict:
        return {"target": self.target,
                "value": self.candidate_value,
                "success": self.expected_success,
                "failure_prob": self.stats.failure_prob}


@dataclass(frozen=True)
class RolloutDecision:
    """Everything a replanning instant looked at, for logs and audits."""

    tick: int
    current_target: int
    chosen: RolloutCandidate | None
    current: RolloutCandidate | None
    candidates: tuple[RolloutCandidate, ...]
    stuck: bool = False

    @property
    def chosen_is_current(self) -> bool:
        return self.chosen is not None and self.chosen is self.current

    def as_dict(self) -> dict:
        return {"tick": self.tick,
                "current_target": self.current_target,
                "chosen_target": None if self.chosen is None else self.chosen.target,
                "chosen_value": None if self.chosen is None else self.chosen.candidate_value,
                "chosen_success": None if self.chosen is None else self.chosen.expected_success,
                "current_value": None if self.current is None else self.current.candidate_value,
                "current_success": None if self.current is None else self.current.expected_success,
                "stuck": self.stuck,
                "candidates": [c.as_dict() for c in self.candidates]}


def rollout_value(candidates) -> float:
    """Value of the temporary node: minimum candidate value."""
    values = [c.candidate_value for c in candidates]
    if not values:
        raise ValueError("no candidates")
    return min(values)


def _score(stats: EdgeStats, policy: FirmPolicy, j_fail: float) -> tuple[float, float]:
    value = stats.expected_cost + stats.failure_prob * j_fail
    success = 0.0
    for node_id, p in stats.transition_probs.items():
        value += p * min(policy.cost_to_go.get(node_id, j_fail), j_fail)
        success += p * policy.success.get(node_id, 0.0)
    return value, success


def _all_fail_stats(n_mc: int) -> EdgeStats:
    return EdgeStats(expected_cost=0.0, transition_probs={}, failure_prob=1.0,
                     sample_count=n_mc)


def evaluate_candidate(env, graph: FirmGraph, policy: FirmPolicy,
                       b_t: GaussianBelief, target: int, source: int | None,
                       pcfg: PlannerConfig, ecfg: ExecConfig,
                       seed: int, tick: int, absorb=None) -> RolloutCandidate:
    """Plan a controller from b_t to the target node and score it by MC.

    Run i draws from the substream (seed, rollout domain, tick, target, i),
    so scores do not depend on evaluation order or thread assignment.
    Candidates whose straight nominal is blocked in the believed map score
    as certain failures without spending simulation budget.
    """
    node = graph.nodes[target]
    ctrl = make_controller(source, target, b_t.mean, node.nf, env.model, env.dt,
                           pcfg.olfc_period, ecfg.cand_steps_factor,
                           ecfg.cand_steps_floor)
    n_mc = pcfg.n_mc_online
    if source != target and not trajectory_clear(ctrl.traj, env.geom):
        stats = _all_fail_stats(n_mc)
        value, success = _score(stats, policy, pcfg.j_fail)
        return RolloutCandidate(target, ctrl, stats, value, success)
    if absorb is None:
        absorb = graph.make_absorb()
    counts: dict[int, int] = {}
    failures = 0
    total_cost = 0.0
    for i in range(n_mc):
        rng = substream(seed, DOMAIN_ROLLOUT_MC, tick, target, i)
        res = execute_edge(env, ctrl, b_t, absorb, rng, ecfg.weights,
                           noiseless=ecfg.noiseless)
        total_cost += res.cost
        if res.outcome == "absorbed":
            counts[res.node_id] = counts.get(res.node_id, 0) + 1
        else:
            failures += 1
    stats = EdgeStats(expected_cost=total_cost / n_mc,
                      transition_probs={k: v / n_mc for k, v in sorted(counts.items())},
                      failure_prob=failures / n_mc,
                      sample_count=n_mc)
    value, success = _score(stats, policy, pcfg.j_fail)
    return RolloutCandidate(target, ctrl, stats, value, success)


def rollout_step(b_t: GaussianBelief, graph: FirmGraph, policy: FirmPolicy,
                 env, current_target: int, pcfg: PlannerConfig, ecfg: ExecConfig,
                 seed: int, tick: int, extra_targets: tuple[int, ...] = (),
                 workers: int = 1) -> RolloutDecision:
    """One replanning instant: evaluate candidates, scan, guard, decide.

    The scan walks candidates in target-id order keeping the cheapest whose
    success estimate is at least the best accepted so far; the winner is then
    held against the current edge's candidate and replaced by it unless the
    winner is at least as good on both axes and strictly better on one.
    When no candidate reaches any node at all, the decision is flagged stuck
    and carries no controller (the caller should hold position).
    """
    radius = ecfg.rollout_radius
    if radius is None:
        radius = 2.0 * graph.dispersion()
    pts, ids = graph.node_points()
    dists = np.linalg.norm(pts[:, :2] - b_t.mean[None, :2], axis=1)
    in_range = dists <= radius
    # Bounded branching: of the in-range nodes only the k nearest are
    # evaluated (k as in the offline connection rule), so the work per
    # instant stays bounded as the roadmap densifies.
    order = sorted(zip(dists[in_range], ids[in_range]))
    targets = {int(i) for _, i in order[:pcfg.k_neighbors]}
    targets.add(current_target)
    targets.update(extra_targets)

    absorb = graph.make_absorb()
    containing = absorb(b_t)

    ordered = sorted(targets)

    def job(t: int) -> RolloutCandidate:
        return evaluate_candidate(env, graph, policy, b_t, t, containing,
                                  pcfg, ecfg, seed, tick, absorb)

    if workers > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            candidates = list(pool.map(job, ordered))
    else:
        candidates = [job(t) for t in ordered]

    current = next(c for c in candidates if c.target == current_target)

    if all(not c.stats.transition_probs for c in candidates):
        return RolloutDecision(tick, current_target, None, current,
                               tuple(candidates), stuck=True)

    best_success = 0.0
    best_value = np.inf
    chosen = None
    for cand in candidates:
        if cand.expected_success >= best_success and cand.candidate_value < best_value:
            chosen = cand
            best_success = cand.expected_success
            best_value = cand.candidate_value

    if chosen is None:
        chosen = current
    elif chosen is not current:
        no_worse = (chosen.expected_success >= current.expected_success
                    and chosen.candidate_value <= current.candidate_value)
        strictly_better = (chosen.expected_success > current.expected_success
                           or chosen.candidate_value < current.candidate_value)
        if not (no_worse and strictly_better):
            chosen = current

    return RolloutDecision(tick, current_target, chosen, current, tuple(candidates))
