"""The closed-loop run driver.

One executor owns the whole online story: it ticks the simulator, runs the
phase-appropriate filter, watches innovation magnitudes for kidnapping,
senses map changes and lazily re-checks the next feedback edges, inserts
nodes for new goals or recovery points, and — under the rollout policy —
re-selects the active local controller at a fixed cadence.  All noise is
drawn from per-tick substreams keyed only by (seed, tick), so two runs with
the same seed see identical worlds regardless of policy or thread count.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beliefs import GaussianBelief
from .config import ExecConfig, PlannerConfig, one_step_cost
from .control import ControllerRun, make_controller
from .estimation import UnobservableNodeError, ekf_step, skf_step
from .graph import (EdgeStats, FirmGraph, FirmPolicy, evaluate_edge,
                    insert_node_online, solve_dp)
from .models import MeasurementBatch, noise_std_batch
from .rng import DOMAIN_LAZY_MC, DOMAIN_SIM_TICK, substream
from .rollout import rollout_step
from .world import (CLOSED, OPEN, BeliefMap, Polygon, Transient, WorldModel,
                    apply_forgetting, sense_environment, sim_env_believed,
                    sim_env_true)

SCENARIO_SCHEMA = "firmslap-scenario/1"

ROW_COLUMNS = ("tick", "x", "y", "theta", "mean_x", "mean_y", "mean_theta",
               "cov_trace", "target", "cum_cost", "z_lost")


class ScenarioFormatError(ValueError):
    """Scenario file failed schema validation."""


@dataclass(frozen=True)
class RunEvent:
    """A timed intervention in a scripted run."""

    tick: int
    kind: str          # set_goal | toggle_door | kidnap | spawn_transient | remove_transient
    payload: dict

    _KINDS = ("set_goal", "toggle_door", "kidnap", "spawn_transient",
              "remove_transient")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ScenarioFormatError(f"unknown event kind {self.kind!r}")
        if self.tick < 0:
            raise ScenarioFormatError("event tick must be nonnegative")


@dataclass
class Scenario:
    """Start pose, ordered goal poses, and timed events."""

    start: np.ndarray
    goals: list[np.ndarray]
    events: list[RunEvent] = field(default_factory=list)
    max_ticks: int | None = None

    def __post_init__(self) -> None:
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.goals = [np.asarray(g, dtype=float).reshape(3) for g in self.goals]
        if not self.goals:
            raise ScenarioFormatError("scenario needs at least one goal")
        ticks = [e.tick for e in self.events]
        if ticks != sorted(ticks):
            raise ScenarioFormatError("event ticks must be nondecreasing")

    def to_doc(self) -> dict:
        return {"schema": SCENARIO_SCHEMA,
                "start": [float(v) for v in self.start],
                "goals": [[float(v) for v in g] for g in self.goals],
                "events": [{"tick": e.tick, "kind": e.kind, **e.payload}
                           for e in self.events],
                "max_ticks": self.max_ticks}

    @staticmethod
    def from_doc(doc: dict) -> "Scenario":
        if doc.get("schema") != SCENARIO_SCHEMA:
            raise ScenarioFormatError(f"bad scenario schema {doc.get('schema')!r}")
        events = []
        for e in doc.get("events", []):
            payload = {k: v for k, v in e.items() if k not in ("tick", "kind")}
            events.append(RunEvent(int(e["tick"]), str(e["kind"]), payload))
        return Scenario(np.asarray(doc["start"], dtype=float),
                        [np.asarray(g, dtype=float) for g in doc["goals"]],
                        events, doc.get("max_ticks"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), indent=1))

    @staticmethod
    def load(path) -> "Scenario":
        return Scenario.from_doc(json.loads(Path(path).read_text()))


class InnovationMonitor:
    """Low-pass filtered worst-case innovation magnitudes.

    Each tick takes the largest absolute range and bearing innovation over
    the measured landmarks and folds them into exponential moving averages;
    the lost flag trips when either average exceeds its threshold.  Ticks
    with no measurements hold the previous averages.
    """

    def __init__(self, beta: float, r_max: float, theta_max: float):
        if r_max <= 0 or theta_max <= 0:
            raise ValueError("thresholds must be positive")
        self.beta = float(beta)
        self.r_max = float(r_max)
        self.theta_max = float(theta_max)
        self.r_bar = 0.0
        self.theta_bar = 0.0

    def update(self, innovations: np.ndarray) -> None:
        if innovations.shape[0] == 0:
            return
        r_t = float(np.max(np.abs(innovations[:, 0])))
        th_t = float(np.max(np.abs(innovations[:, 1])))
        b = self.beta
        self.r_bar = (1.0 - b) * self.r_bar + b * r_t
        self.theta_bar = (1.0 - b) * self.theta_bar + b * th_t

    @property
    def z_lost(self) -> bool:
        return self.r_bar > self.r_max or self.theta_bar > self.theta_max


@dataclass
class RunRecord:
    """Everything a finished run leaves behind."""

    seed: int
    policy: str
    outcome: str                 # success | collision | timeout
    ticks: int
    total_cost: float
    stabilizations: int
    goals_reached: int
    replans: int
    recoveries: int
    dp_resolves: int
    rows: np.ndarray             # (T, len(ROW_COLUMNS))
    decisions: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"seed": self.seed, "policy": self.policy, "outcome": self.outcome,
                "ticks": self.ticks, "total_cost": self.total_cost,
                "stabilizations": self.stabilizations,
                "goals_reached": self.goals_reached, "replans": self.replans,
                "recoveries": self.recoveries, "dp_resolves": self.dp_resolves}

    def to_jsonl(self, path) -> None:
        """Line-delimited log: summary, then rows, decisions, events."""
        with open(path, "w") as f:
            f.write(json.dumps({"type": "summary", **self.summary()}) + "\n")
            for row in self.rows:
                f.write(json.dumps({"type": "row",
                                    **dict(zip(ROW_COLUMNS, map(float, row)))}) + "\n")
            for d in self.decisions:
                f.write(json.dumps({"type": "decision", **d}) + "\n")
            for e in self.events:
                f.write(json.dumps({"type": "event", **e}) + "\n")

    def jsonl_bytes(self) -> bytes:
        lines = [json.dumps({"type": "summary", **self.summary()})]
        lines += [json.dumps({"type": "row", **dict(zip(ROW_COLUMNS, map(float, r)))})
                  for r in self.rows]
        lines += [json.dumps({"type": "decision", **d}) for d in self.decisions]
        lines += [json.dumps({"type": "event", **e}) for e in self.events]
        return ("\n".join(lines) + "\n").encode()

    def write_rows_csv(self, path) -> None:
        header = ",".join(ROW_COLUMNS)
        np.savetxt(path, self.rows, delimiter=",", header=header, comments="")


class Executor:
    """Stateful tick loop over a world, a roadmap, and a scenario."""

    def __init__(self, world: WorldModel, graph: FirmGraph, scenario: Scenario,
                 pcfg: PlannerConfig, ecfg: ExecConfig, seed: int):
        self.world = world
        self.graph = graph
        self.scenario = scenario
        self.pcfg = pcfg
        self.ecfg = ecfg
        self.seed = int(seed)
        self.kind = ecfg.policy
        if self.kind not in ("firm", "rollout"):
            raise ValueError(f"unknown policy kind {self.kind!r}")

        self.bmap = BeliefMap(world)
        self.env_true = sim_env_true(world)
        self.env_b = sim_env_believed(self.bmap)
        self.model = self.env_true.model
        self.dt = world.robot.dt
        self.absorb = graph.make_absorb()

        self.tick = 0
        self.outcome: str | None = None
        self.cum_cost = 0.0
        self.stabilizations = 0
        self.goals_reached = 0
        self.replans = 0
        self.recoveries = 0
        self.dp_resolves = 0
        self.rows: list[tuple] = []
        self.decisions: list[dict] = []
        self.event_log: list[dict] = []

        self.monitor = InnovationMonitor(ecfg.beta, ecfg.r_max, ecfg.theta_max)
        self.recovering = False
        self._prev_z_lost = False
        self._extra_targets: tuple[int, ...] = ()
        self._pending_goal: np.ndarray | None = None
        self._force_instant = False

        self._events = list(scenario.events)
        self._event_idx = 0
        self._commands: list[dict] = []
        self._cmd_lock = threading.Lock()

        self._rollout_period = max(1, int(round(ecfg.t_rollout / self.dt)))
        self._lm_row = {lm.id: i for i, lm in enumerate(world.landmarks)}
        self._n_lm = len(world.landmarks)
        self._max_ticks = scenario.max_ticks or ecfg.max_ticks

        # Start: snap the belief to the nearest node's stationary belief.
        self.start_node = graph.nearest_node(scenario.start[:2])
        self.belief = graph.nodes[self.start_node].belief
        self.x_true = scenario.start.copy()

        self._goal_queue = [g.copy() for g in scenario.goals]
        self.goal_node: int | None = None
        self.policy: FirmPolicy | None = None
        self._activate_goal(self._goal_queue.pop(0))

        self.active: ControllerRun | None = None
        self.active_target: int | None = None
        if self.goal_node == self.start_node and not self._goal_queue:
            self.outcome = "success"
            self.goals_reached = 1
        else:
            if self.goal_node == self.start_node and self._goal_queue:
                self.goals_reached += 1
                self._log(0, "goal_reached", node=self.start_node)
                self._activate_goal(self._goal_queue.pop(0))
            self._follow_feedback(self.start_node)

    # -- public API ------------------------------------------------------

    def submit_command(self, cmd: dict) -> None:
        """Queue an external event; applied at the next tick boundary."""
        with self._cmd_lock:
            self._commands.append(dict(cmd))

    def step(self) -> str | None:
        """Advance one tick; returns the outcome string once the run ends."""
        if self.outcome is not None:
            return self.outcome
        t = self.tick
        if t >= self._max_ticks:
            self.outcome = "timeout"
            return self.outcome

        self._drain_events(t)
        reverted = apply_forgetting(self.bmap, t, self.dt)
        if reverted:
            self._log(t, "forgetting", entries=[c.id for c in reverted])
            self._restore_overridden(t)
        changes = sense_environment(self.x_true, self.world, self.bmap, t)
        for ch in changes:
            self.bmap.apply_change(ch, t)
            self._log(t, "map_change", change=ch.kind, id=ch.id, state=ch.state)
        if changes or reverted:
            self._lazy_eval(t)
            # The active edge was chosen against the old map; reconsider it
            # now instead of waiting out the rollout period.
            self._force_instant = True
        if self._pending_goal is not None:
            goal, self._pending_goal = self._pending_goal, None
            self._change_goal(goal, t)
            self._force_instant = True

        self._recovery_update(t)
        if not self.recovering:
            self._absorption_and_switch(t)
            if self.outcome is not None:
                return self.outcome
            if (self.kind == "rollout" and self.active is not None and t > 0
                    and (t % self._rollout_period == 0 or self._force_instant)):
                self._force_instant = False
                self._rollout_instant(t)

        u = self._control()
        gen = substream(self.seed, DOMAIN_SIM_TICK, t)
        w_draw = gen.standard_normal(self.model.nw)
        v_draw = gen.standard_normal((self._n_lm, 2))
        if self.ecfg.noiseless:
            w = np.zeros(self.model.nw)
        else:
            w = self.model.process_noise_std(u) * w_draw
        self.x_true = self.model.propagate(self.x_true, u, w, self.dt)
        if self.world.collides(self.x_true):
            self.outcome = "collision"
            self._record_row(t)
            return self.outcome

        batch = self.env_true.measure(self.x_true)
        if len(batch) and not self.ecfg.noiseless:
            rows = np.fromiter((self._lm_row[int(i)] for i in batch.ids),
                               dtype=int, count=len(batch))
            std = noise_std_batch(self.x_true, batch.xy, batch.normals,
                                  self.env_true.obs_params)
            z = batch.z + std * v_draw[rows]
            z[:, 1] = np.mod(z[:, 1] + np.pi, 2.0 * np.pi) - np.pi
            batch = MeasurementBatch(batch.ids, batch.xy, batch.normals, z)

        if self.active is not None and not self.recovering and self.active.phase == "funnel":
            nf = self.active.ctrl.target_filter
            self.belief, _, innov = skf_step(self.belief, nf, self.model, u,
                                             self.dt, batch)
        else:
            self.belief, innov = ekf_step(self.belief, self.model, u, self.dt,
                                          batch, self.env_true.obs_params)
        self.monitor.update(innov)
        self.cum_cost += one_step_cost(self.belief, u, self.ecfg.weights)
        self._record_row(t)
        self.tick = t + 1
        return None

    def run(self) -> RunRecord:
        while self.outcome is None:
            self.step()
        return self.record()

    def record(self) -> RunRecord:
        rows = (np.array(self.rows, dtype=float) if self.rows
                else np.zeros((0, len(ROW_COLUMNS))))
        return RunRecord(self.seed, self.kind, self.outcome or "timeout",
                         self.tick, self.cum_cost, self.stabilizations,
                         self.goals_reached, self.replans, self.recoveries,
                         self.dp_resolves, rows, list(self.decisions),
                         list(self.event_log))

    # -- events and goals --------------------------------------------------

    def _log(self, tick: int, kind: str, **data) -> None:
        self.event_log.append({"tick": tick, "kind": kind, **data})

    def _drain_events(self, t: int) -> None:
        due: list[tuple[str, dict]] = []
        while (self._event_idx < len(self._events)
               and self._events[self._event_idx].tick <= t):
            e = self._events[self._event_idx]
            due.append((e.kind, e.payload))
            self._event_idx += 1
        with self._cmd_lock:
            pending, self._commands = self._commands, []
        for cmd in pending:
            payload = {k: v for k, v in cmd.items() if k != "kind"}
            due.append((cmd["kind"], payload))
        for kind, payload in due:
            self._apply_event(kind, payload, t)

    def _apply_event(self, kind: str, payload: dict, t: int) -> None:
        if kind == "kidnap":
            self.x_true = np.array([float(payload["x"]), float(payload["y"]),
                                    float(payload.get("theta", 0.0))])
        elif kind == "toggle_door":
            door = self.world.doors[payload["id"]]
            door.state = OPEN if door.state == CLOSED else CLOSED
            payload = {**payload, "state": door.state}
        elif kind == "spawn_transient":
            tid = payload["id"]
            self.world.transients[tid] = Transient(tid, Polygon(payload["vertices"]))
        elif kind == "remove_transient":
            self.world.transients.pop(payload["id"], None)
        elif kind == "set_goal":
            self._pending_goal = np.array([float(payload["x"]), float(payload["y"]),
                                           float(payload.get("theta", 0.0))])
            self._goal_queue = []
        else:
            raise ScenarioFormatError(f"unknown event kind {kind!r}")
        self._log(t, kind, **{k: v for k, v in payload.items()
                              if k != "vertices"})

    def _activate_goal(self, point: np.ndarray) -> None:
        """Resolve a goal pose to a node (inserting one when needed)."""
        nearest = self.graph.nearest_node(point[:2])
        node = self.graph.nodes[nearest]
        if float(np.linalg.norm(node.point[:2] - point[:2])) <= node.region.pos_radius:
            self.goal_node = nearest
            self.policy = solve_dp(self.graph, nearest)
        else:
            radius = self.ecfg.rollout_radius or 2.0 * self.graph.dispersion()
            gid, policy = insert_node_online(self.graph, self.env_b, point,
                                             radius, self.pcfg.n_mc_online,
                                             self.seed, goal=None)
            self.goal_node = gid
            self.policy = solve_dp(self.graph, gid)
            self.absorb = self.graph.make_absorb()
        self.dp_resolves += 1

    def _change_goal(self, point: np.ndarray, t: int) -> None:
        try:
            self._activate_goal(point)
        except Exception as exc:  # noqa: BLE001  (a bad goal must not kill the run)
            self._log(t, "goal_rejected", reason=str(exc))
            return
        self._log(t, "goal_changed", node=self.goal_node,
                  x=float(point[0]), y=float(point[1]))

    # -- controller management ---------------------------------------------

    def _follow_feedback(self, node_id: int) -> None:
        eid = self.policy.feedback.get(node_id) if self.policy else None
        if eid is None:
            self.active = None
            self.active_target = None
            return
        edge = self.graph.edges[eid]
        self.active = ControllerRun(edge.controller, self.model, self.dt)
        self.active_target = edge.target

    def _set_active(self, controller, target: int) -> None:
        self.active = ControllerRun(controller, self.model, self.dt)
        self.active_target = target

    def _exclude(self) -> int | None:
        if self.active is None:
            return None
        src = self.active.ctrl.source
        if src is not None and src != self.active.ctrl.target:
            return src
        return None

    def _absorption_and_switch(self, t: int) -> None:
        if self.active is None:
            node = self.graph.nearest_node(self.belief.mean[:2])
            self._follow_feedback(node)
            if self.kind == "rollout" and self.active is None:
                pass  # nothing reachable; rollout instant may still help later
            return
        hit = self.absorb(self.belief, self._exclude())
        if hit is None:
            if self.active.exhausted:
                self.replans += 1
                target = self.active_target
                nf = self.graph.nodes[target].nf
                ctrl = make_controller(None, target, self.belief.mean, nf,
                                       self.model, self.dt, self.pcfg.olfc_period,
                                       self.pcfg.max_steps_factor,
                                       self.pcfg.max_steps_floor)
                self._set_active(ctrl, target)
                self._log(t, "replan", target=target)
            return
        if hit == self.active_target:
            self.stabilizations += 1
            self._log(t, "stabilized", node=hit)
        if hit == self.goal_node:
            self.goals_reached += 1
            self._log(t, "goal_reached", node=hit)
            if self._goal_queue:
                self._activate_goal(self._goal_queue.pop(0))
                self._follow_feedback(hit)
            else:
                self.outcome = "success"
            return
        self._follow_feedback(hit)
        if self.active is None:
            self._log(t, "no_feedback", node=hit)

    def _rollout_instant(self, t: int) -> None:
        checks0 = self.bmap.checks
        dec = rollout_step(self.belief, self.graph, self.policy, self.env_b,
                           self.active_target, self.pcfg, self.ecfg, self.seed,
                           t, extra_targets=self._extra_targets,
                           workers=self.pcfg.workers)
        self._extra_targets = ()
        self.decisions.append({**dec.as_dict(),
                               "collision_checks": self.bmap.checks - checks0})
        if dec.stuck:
            self._log(t, "planning_stuck")
            self.active = None
            self.active_target = None
            return
        if not dec.chosen_is_current:
            self._set_active(dec.chosen.controller, dec.chosen.target)

    def _control(self) -> np.ndarray:
        if self.recovering:
            u = self.model.zero_control()
            u[-1] = self.ecfg.scan_omega
            return u
        if self.active is None:
            return self.model.zero_control()
        return self.active.next_control(self.belief)

    # -- recovery ------------------------------------------------------------

    def _recovery_update(self, t: int) -> None:
        z = self.monitor.z_lost
        if z and not self._prev_z_lost:
            self.belief = GaussianBelief(self.belief.mean,
                                         np.diag(self.ecfg.sigma_big),
                                         self.belief.tick)
            self.recovering = True
            self.recoveries += 1
            self.active = None
            self.active_target = None
            self._log(t, "kidnap_detected", r_bar=self.monitor.r_bar,
                      theta_bar=self.monitor.theta_bar)
        self._prev_z_lost = z
        if not self.recovering:
            return
        trace = float(np.trace(self.belief.cov))
        if z or trace > self.ecfg.trace_bound:
            return
        # Localized again: optionally pin a node at the recovered mean.
        mean = self.belief.mean
        nearest = self.graph.nearest_node(mean[:2])
        delta = float(np.linalg.norm(self.graph.nodes[nearest].point[:2] - mean[:2]))
        target = nearest
        if delta > self.ecfg.delta_min:
            if self.bmap.collides(mean):
                return  # keep scanning until the mean is somewhere insertable
            try:
                radius = self.ecfg.rollout_radius or 2.0 * self.graph.dispersion()
                gid, _ = insert_node_online(self.graph, self.env_b, mean, radius,
                                            self.pcfg.n_mc_online, self.seed,
                                            goal=None)
            except UnobservableNodeError:
                return
            self.policy = solve_dp(self.graph, self.goal_node)
            self.dp_resolves += 1
            self.absorb = self.graph.make_absorb()
            self._extra_targets = (gid,)
            target = gid
            self._log(t, "node_inserted", node=gid)
        self.recovering = False
        self._log(t, "recovered", node=target, cov_trace=trace)
        nf = self.graph.nodes[target].nf
        ctrl = make_controller(None, target, mean, nf, self.model, self.dt,
                               self.pcfg.olfc_period, self.pcfg.max_steps_factor,
                               self.pcfg.max_steps_floor)
        self._set_active(ctrl, target)

    # -- map-change replanning -------------------------------------------------

    def _feedback_edges_ahead(self) -> list[int]:
        node = self.graph.nearest_node(self.belief.mean[:2])
        out: list[int] = []
        n = node
        for _ in range(self.ecfg.l_edges):
            eid = self.policy.feedback.get(n) if self.policy else None
            if eid is None:
                break
            out.append(eid)
            n = self.graph.edges[eid].target
        if not out:
            # No feedback here (the node is cut off): re-check the local
            # edges we previously penalized, else a sensed improvement could
            # never lift the penalty and the robot would hold forever.
            out = [eid for eid in sorted(self.graph.out_edges.get(node, []))
                   if self.graph.edges[eid].overridden][: self.ecfg.l_edges]
        return out

    def _lazy_eval(self, t: int) -> None:
        """Re-check the next feedback edges against the changed map."""
        touched = 0
        updated = 0
        for eid in self._feedback_edges_ahead():
            edge = self.graph.edges[eid]
            stats = evaluate_edge(self.env_b, edge,
                                  self.graph.nodes[edge.source].belief,
                                  self.absorb, self.pcfg.n_mc_online, self.seed,
                                  DOMAIN_LAZY_MC, self.ecfg.weights,
                                  self.ecfg.noiseless)
            touched += 1
            if abs(stats.failure_prob - edge.stats.failure_prob) > self.ecfg.alpha:
                edge.stats = stats
                edge.overridden = True
                updated += 1
        resolved = False
        if updated:
            self.policy = solve_dp(self.graph, self.goal_node)
            self.dp_resolves += 1
            resolved = True
        self._log(t, "lazy_eval", checked=touched, updated=updated,
                  resolved=resolved)

    def _restore_overridden(self, t: int) -> None:
        restored = 0
        for edge in self.graph.edges.values():
            if edge.overridden:
                b = edge.baseline_stats
                edge.stats = EdgeStats(b.expected_cost, dict(b.transition_probs),
                                       b.failure_prob, b.sample_count)
                edge.overridden = False
                restored += 1
        if restored:
            self.policy = solve_dp(self.graph, self.goal_node)
            self.dp_resolves += 1
            self._log(t, "stats_restored", edges=restored)

    # -- recording ---------------------------------------------------------------

    def _record_row(self, t: int) -> None:
        b = self.belief
        self.rows.append((t, self.x_true[0], self.x_true[1], self.x_true[2],
                          b.mean[0], b.mean[1], b.mean[2],
                          float(np.trace(b.cov)),
                          -1 if self.active_target is None else self.active_target,
                          self.cum_cost, 1.0 if self.monitor.z_lost else 0.0))


def run_scenario(world: WorldModel, graph: FirmGraph, scenario: Scenario,
                 pcfg: PlannerConfig, ecfg: ExecConfig, seed: int) -> RunRecord:
    """Run one scripted scenario on private copies of the world and graph."""
    ex = Executor(world.clone(), graph.clone(), scenario, pcfg, ecfg, seed)
    return ex.run()
