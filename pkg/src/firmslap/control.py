"""Local controllers: nominal paths, tracking LQR, stabilizing funnels.

An edge controller has two phases.  The slide tracks a nominal trajectory
with a finite-horizon LQR around the linearized model; the funnel then
holds position at the target node with short receding-horizon control
bursts (replanned open loop from the current mean every few steps) while
the node's frozen filter pulls the covariance to its stationary value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .beliefs import GaussianBelief, angle_diff, wrap_angle, wrap_angles
from .config import CostWeights, one_step_cost
from .estimation import (Measurement, NodeFilter, ekf_predict, ekf_step,
                         ekf_update, skf_predict, skf_step, skf_update)
from .models import MeasurementBatch, MotionModel, noise_std_batch


class PlanningError(ValueError):
    """Nominal planning preconditions violated."""


@dataclass(frozen=True)
class NominalTrajectory:
    """States at dt spacing and the piecewise-constant controls between them.

    states has n_steps + 1 rows; consecutive states are consistent with
    noiseless propagation of the paired control.
    """

    states: np.ndarray   # (n+1, 3)
    controls: np.ndarray  # (n, nu)

    def __post_init__(self) -> None:
        s = np.asarray(self.states, dtype=float)
        c = np.asarray(self.controls, dtype=float)
        if s.shape[0] != c.shape[0] + 1:
            raise PlanningError("states/controls length mismatch")
        s.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "controls", c)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.states[:, :2], axis=0), axis=1)))


def _phase_steps(total: float, rate_max: float, dt: float) -> int:
    if abs(total) < 1e-12:
        return 0
    return max(1, int(np.ceil(abs(total) / (rate_max * dt) - 1e-9)))


def plan_nominal(start: np.ndarray, goal: np.ndarray, model: MotionModel,
                 dt: float) -> NominalTrajectory:
    """Kinematically feasible nominal from start to goal configuration.

    Unicycle: turn in place toward the goal, drive straight, turn to the
    goal heading.  Omni: straight-line translation with simultaneous
    heading interpolation.  Controls respect saturation; identical start
    and goal yield an empty trajectory.
    """
    start = np.asarray(start, dtype=float).reshape(3)
    goal = np.asarray(goal, dtype=float).reshape(3)
    states = [start.copy()]
    controls: list[np.ndarray] = []

    def emit(u: np.ndarray, n: int) -> None:
        for _ in range(n):
            controls.append(u)
            states.append(model.propagate(states[-1], u, np.zeros(model.nw), dt))

    delta = goal[:2] - start[:2]
    dist = float(np.linalg.norm(delta))

    if model.kind == "omni":
        dth = angle_diff(goal[2], start[2])
        horizon = max(dist / model.v_max, abs(dth) / model.omega_max)
        n = _phase_steps(horizon, 1.0, dt)
        if n > 0:
            u = np.array([delta[0], delta[1], dth]) / (n * dt)
            emit(u, n)
    elif model.kind == "unicycle":
        heading = start[2]
        if dist > 1e-12:
            face = float(np.arctan2(delta[1], delta[0]))
            dth = angle_diff(face, heading)
            n = _phase_steps(dth, model.omega_max, dt)
            if n > 0:
                emit(np.array([0.0, dth / (n * dt)]), n)
            heading = face
            n = _phase_steps(dist, model.v_max, dt)
            emit(np.array([dist / (n * dt), 0.0]), n)
        dth = angle_diff(goal[2], heading)
        n = _phase_steps(dth, model.omega_max, dt)
        if n > 0:
            emit(np.array([0.0, dth / (n * dt)]), n)
    else:
        raise PlanningError(f"unknown model kind {model.kind!r}")

    if not controls:
        return NominalTrajectory(np.array([start]), np.zeros((0, model.nu)))
    return NominalTrajectory(np.array(states), np.array(controls))


def trajectory_clear(traj: NominalTrajectory, geom) -> bool:
    """All nominal states collision-free against the given map handle."""
    return not any(geom.collides(s) for s in traj.states)


def lqr_gains(traj: NominalTrajectory, model: MotionModel, dt: float,
              w_x: np.ndarray | None = None, w_u: np.ndarray | None = None
              ) -> tuple[np.ndarray, np.ndarray]:
    """Finite-horizon LQR gains along a nominal trajectory.

    Backward Riccati recursion with state/control weights defaulting to
    identity.  Returns (gains, value_matrices); the tracking law is
    u_k = u_nom_k - K_k (x - x_nom_k).
    """
    n = traj.n_steps
    w_x = np.eye(3) if w_x is None else w_x
    w_u = np.eye(model.nu) if w_u is None else w_u
    gains = np.zeros((n, model.nu, 3))
    values = np.zeros((n + 1, 3, 3))
    values[n] = w_x
    for k in range(n - 1, -1, -1):
        A, B, _ = model.jacobians(traj.states[k], traj.controls[k], dt)
        S = values[k + 1]
        K = np.linalg.solve(w_u + B.T @ S @ B, B.T @ S @ A)
        Sk = w_x + A.T @ S @ (A - B @ K)
        gains[k] = K
        values[k] = 0.5 * (Sk + Sk.T)
    return gains, values


def olfc_controls(mean: np.ndarray, target: np.ndarray, model: MotionModel,
                  dt: float, period: int) -> np.ndarray:
    """First few controls of an open-loop plan from the mean to the target."""
    traj = plan_nominal(mean, target, model, dt)
    return traj.controls[:period]


@dataclass(frozen=True)
class LocalController:
    """Slide-then-funnel edge controller toward a target node."""

    source: int | None          # graph node id, None when planned from a belief
    target: int
    traj: NominalTrajectory
    gains: np.ndarray
    target_filter: NodeFilter
    olfc_period: int = 5
    max_steps: int = 250


def make_controller(source: int | None, target: int, start: np.ndarray,
                    target_filter: NodeFilter, model: MotionModel, dt: float,
                    olfc_period: int, max_steps_factor: int,
                    max_steps_floor: int) -> LocalController:
    traj = plan_nominal(start, target_filter.point, model, dt)
    gains, _ = lqr_gains(traj, model, dt)
    cap = max(max_steps_factor * traj.n_steps, max_steps_floor)
    return LocalController(source, target, traj, gains, target_filter,
                           olfc_period, cap)


class ControllerRun:
    """Stateful stepping of a LocalController.

    Tracks the slide index and the funnel's open-loop burst; exposes which
    estimator the current phase uses.
    """

    def __init__(self, ctrl: LocalController, model: MotionModel, dt: float):
        self.ctrl = ctrl
        self.model = model
        self.dt = dt
        self.k = 0
        self.steps = 0
        self._queue: list[np.ndarray] = []

    @property
    def phase(self) -> str:
        return "slide" if self.k < self.ctrl.traj.n_steps else "funnel"

    @property
    def exhausted(self) -> bool:
        return self.steps >= self.ctrl.max_steps

    def next_control(self, belief: GaussianBelief) -> np.ndarray:
        self.steps += 1
        traj = self.ctrl.traj
        if self.k < traj.n_steps:
            dx = belief.mean - traj.states[self.k]
            dx[2] = angle_diff(belief.mean[2], traj.states[self.k][2])
            u = traj.controls[self.k] - self.ctrl.gains[self.k] @ dx
            self.k += 1
            return self.model.clamp(u)
        if not self._queue:
            burst = olfc_controls(belief.mean, self.ctrl.target_filter.point,
                                  self.model, self.dt, self.ctrl.olfc_period)
            self._queue = [u for u in burst]
        if self._queue:
            return self.model.clamp(self._queue.pop(0))
        return self.model.zero_control()

    def filter_predict(self, belief: GaussianBelief, u: np.ndarray) -> GaussianBelief:
        if self.phase == "funnel":
            return skf_predict(belief, self.ctrl.target_filter, self.model, u, self.dt)
        return ekf_predict(belief, self.model, u, self.dt)

    def filter_update(self, belief: GaussianBelief, measurements: Sequence[Measurement],
                      obs_params):
        if self.phase == "funnel":
            return skf_update(belief, self.ctrl.target_filter, measurements, obs_params)
        return ekf_update(belief, measurements, obs_params)

    def filter_step(self, belief: GaussianBelief, u: np.ndarray,
                    batch: MeasurementBatch, obs_params) -> GaussianBelief:
        """Fused predict + update with the phase's estimator."""
        if self.phase == "funnel":
            b, _, _ = skf_step(belief, self.ctrl.target_filter, self.model,
                               u, self.dt, batch)
            return b
        b, _ = ekf_step(belief, self.model, u, self.dt, batch, obs_params)
        return b


# --- closed-loop edge simulation -------------------------------------------


@dataclass(frozen=True)
class EdgeResult:
    outcome: str               # "absorbed" | "collision" | "truncated"
    node_id: int | None
    steps: int
    cost: float
    final_belief: GaussianBelief
    mean_trace: np.ndarray | None = None


def sample_pose(belief: GaussianBelief, rng: np.random.Generator) -> np.ndarray:
    L = np.linalg.cholesky(belief.cov + 1e-15 * np.eye(3))
    x = belief.mean + L @ rng.standard_normal(3)
    return np.array([x[0], x[1], wrap_angle(x[2])])


def noisy_batch(batch: MeasurementBatch, x_true: np.ndarray, obs_params,
                rng: np.random.Generator | None) -> MeasurementBatch:
    """Returns the batch with measurement noise applied (none when rng is None)."""
    if rng is None or not len(batch):
        return batch
    std = noise_std_batch(x_true, batch.xy, batch.normals, obs_params)
    z = batch.z + std * rng.standard_normal(std.shape)
    z[:, 1] = wrap_angles(z[:, 1])
    return MeasurementBatch(batch.ids, batch.xy, batch.normals, z)


def execute_edge(env, ctrl: LocalController, b0: GaussianBelief,
                 absorb: Callable[[GaussianBelief, int | None], int | None],
                 rng: np.random.Generator, weights: CostWeights,
                 noiseless: bool = False, x_true: np.ndarray | None = None,
                 collect_trace: bool = False) -> EdgeResult:
    """Run one closed-loop edge from b0 until absorption, collision or cap.

    The belief is checked against all node regions every step (first hit
    wins; the source node is excluded unless the edge is a self-stabilizer,
    handled by the caller's absorb closure).  True-state collisions are
    checked against env's map handle.  When noiseless, sampled noises are
    zero and the true state starts at the belief mean.
    """
    model, dt = env.model, env.dt
    run = ControllerRun(ctrl, model, dt)
    if x_true is None:
        x_true = b0.mean.copy() if noiseless else sample_pose(b0, rng)
    b = b0
    cost = 0.0
    trace = [] if collect_trace else None
    exclude = ctrl.source if ctrl.source is not None and ctrl.source != ctrl.target else None
    while True:
        hit = absorb(b, exclude)
        if hit is not None:
            return EdgeResult("absorbed", hit, run.steps, cost, b,
                              np.array(trace) if trace is not None else None)
        if run.exhausted:
            return EdgeResult("truncated", None, run.steps, cost, b,
                              np.array(trace) if trace is not None else None)
        u = run.next_control(b)
        if noiseless:
            w = np.zeros(model.nw)
        else:
            w = model.process_noise_std(u) * rng.standard_normal(model.nw)
        x_true = model.propagate(x_true, u, w, dt)
        if env.geom.collides(x_true):
            return EdgeResult("collision", None, run.steps, cost, b,
                              np.array(trace) if trace is not None else None)
        batch = noisy_batch(env.measure(x_true), x_true, env.obs_params,
                            None if noiseless else rng)
        b = run.filter_step(b, u, batch, env.obs_params)
        cost += one_step_cost(b, u, weights)
        if trace is not None:
            trace.append(np.concatenate([x_true, b.mean, [np.trace(b.cov)]]))
