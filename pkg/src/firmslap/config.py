"""Shared configuration dataclasses and the per-step cost."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beliefs import GaussianBelief


@dataclass(frozen=True)
class CostWeights:
    """Per-step cost: zeta_p * tr(P) + zeta_u * ||u||_2 + zeta_t."""

    zeta_p: float = 1.0
    zeta_u: float = 1.0
    zeta_t: float = 1.0


def one_step_cost(belief: GaussianBelief, u: np.ndarray, w: CostWeights) -> float:
    c = belief.cov
    tr = float(c[0, 0]) + float(c[1, 1]) + float(c[2, 2])
    return w.zeta_p * tr + w.zeta_u * float(np.sqrt(u @ u)) + w.zeta_t


@dataclass(frozen=True)
class PlannerConfig:
    """Offline roadmap construction parameters."""

    k_neighbors: int = 5
    n_mc: int = 100
    n_mc_online: int = 30
    mean_radius: float = 0.3
    ang_radius: float = 0.3
    cov_radius_factor: float = 0.5   # cov radius = factor * ||P_plus||_F
    j_fail: float = 10_000.0
    dp_tol: float = 1e-9
    dp_max_sweeps: int = 1_000_000
    olfc_period: int = 5
    max_steps_factor: int = 5        # edge step cap = factor * nominal length
    max_steps_floor: int = 250
    workers: int = 1                 # >1 evaluates edges in a thread pool
    noiseless: bool = False          # zero sampled noise in edge simulations
    weights: CostWeights = field(default_factory=CostWeights)


@dataclass(frozen=True)
class ExecConfig:
    """Online execution, replanning and recovery parameters."""

    policy: str = "rollout"          # "rollout" | "firm"
    t_rollout: float = 2.0           # seconds of sim time between rollout instants
    rollout_radius: float | None = None  # None: 2x mean nearest-node spacing
    l_edges: int = 2                 # feedback edges re-checked after map changes
    alpha: float = 0.1               # failure-probability change that forces an update
    beta: float = 0.2                # innovation EMA weight
    r_max: float = 1.0               # filtered range-innovation threshold, m
    theta_max: float = float(np.radians(50.0))
    sigma_big: tuple[float, float, float] = (25.0, 25.0, float(np.pi ** 2))
    delta_min: float = 1.0           # min distance to justify an in-place node
    trace_bound: float = 5.0         # no translation while tr(P) exceeds this
    scan_omega: float = 0.5          # recovery spin rate, rad/s
    max_ticks: int = 20_000
    cand_steps_factor: int = 3       # online candidate sim cap = factor * nominal
    cand_steps_floor: int = 60
    noiseless: bool = False
    weights: CostWeights = field(default_factory=CostWeights)
