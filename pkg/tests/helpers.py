"""Shared constants and small utilities for the test suite.

The per-fixture planner/executor settings here are the tuned reference
configurations the integration and acceptance tests run under; tests import
them instead of restating numbers.
"""

import numpy as np

from firmslap.config import ExecConfig, PlannerConfig
from firmslap.executor import ROW_COLUMNS

COL = {name: i for i, name in enumerate(ROW_COLUMNS)}

# two-doors room: build + run settings, and the two doorway bands used to
# detect which passage a trajectory used.
TWO_DOORS_BUILD_SEED = 11
TWO_DOORS_PCFG = PlannerConfig(n_mc=60, workers=1)
TWO_DOORS_ECFG = dict(r_max=3.0)
BACK_BAND = (2.5, 3.75, 5.0, 5.3)     # toggleable back doorway
FRONT_BAND = (10.75, 11.5, 7.05, 8.0)  # tunnel interior past the apron

# office patrol: the nominal-vs-rollout comparison settings.
OFFICE_BUILD_SEED = 7
OFFICE_NODES_REQUESTED = 49
OFFICE_PCFG = PlannerConfig(n_mc=60, n_mc_online=15, workers=1)
OFFICE_FIRM_ECFG = ExecConfig(policy="firm", r_max=6.0)
OFFICE_ROLLOUT_ECFG = ExecConfig(policy="rollout", r_max=6.0, t_rollout=3.0,
                                 rollout_radius=4.5)
OFFICE_TREND_SEEDS = tuple(range(50))

# empty grid: complexity-measurement settings.  The replanning neighborhood
# R below is a diameter; candidates are gathered within R/2 of the belief.
GRID_BUILD_SEED = 3
GRID_CONNECT_RADIUS = 3.05
GRID_R_DIAMETER = 6.0
GRID_PCFG = PlannerConfig(n_mc=60, n_mc_online=30, workers=1)
GRID_ECFG = ExecConfig(policy="rollout", r_max=50.0,
                       rollout_radius=GRID_R_DIAMETER / 2.0)
GRID_SEEDS = tuple(range(10))

# kidnap room: a two-node roadmap so detection + recovery is isolated from
# planning; monitor thresholds are the defaults (1 m, 50 deg).
KIDNAP_NODES = np.array([[1.0, 1.0, 0.0], [4.5, 1.5, 0.0]])
KIDNAP_PCFG = PlannerConfig(n_mc=40, workers=1)
KIDNAP_ECFG = ExecConfig(policy="rollout")


def crossed(rows: np.ndarray, band) -> bool:
    """True when any logged pose lies inside the axis-aligned band."""
    x0, x1, y0, y1 = band
    x, y = rows[:, COL["x"]], rows[:, COL["y"]]
    return bool(np.any((x > x0) & (x < x1) & (y > y0) & (y < y1)))


def first_tick_where(rows: np.ndarray, column: str, predicate) -> int | None:
    """Tick of the first row whose column satisfies the predicate."""
    vals = rows[:, COL[column]]
    hit = np.nonzero(predicate(vals))[0]
    if hit.size == 0:
        return None
    return int(rows[hit[0], COL["tick"]])


def run_checks_total(record) -> int:
    """Believed-map checks a run spent across all its replanning instants."""
    return sum(int(d["collision_checks"]) for d in record.decisions
               if "collision_checks" in d)


# --- synthetic roadmaps for graph-math tests ---------------------------------

def synthetic_graph(n_nodes, edge_specs, cfg=None):
    """A FirmGraph with dummy geometry, for exercising the DP/chain math.

    edge_specs rows: (source, target, expected_cost, transition_probs,
    failure_prob).  Nodes are placed on the x axis so position queries work.
    """
    from firmslap.graph import EdgeStats, FirmEdge, FirmGraph, FirmNode

    g = FirmGraph(world=None, cfg=cfg or PlannerConfig(), seed=0)
    for i in range(n_nodes):
        g.add_node(FirmNode(i, np.array([float(i), 0.0, 0.0]), None, None, None))
    for eid, (src, dst, cost, probs, fail) in enumerate(edge_specs):
        e = FirmEdge(eid, src, dst, None)
        e.stats = EdgeStats(float(cost), dict(probs), float(fail), 100)
        e.baseline_stats = EdgeStats(float(cost), dict(probs), float(fail), 100)
        g.add_edge(e)
    return g


def random_synthetic_graph(seed, n_nodes=5):
    """Random strongly-branching roadmap with proper outcome distributions."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_nodes):
        for _ in range(int(rng.integers(1, 4))):
            others = np.array([j for j in range(n_nodes) if j != i])
            k = int(rng.integers(1, min(3, len(others)) + 1))
            targets = rng.choice(others, size=k, replace=False)
            fail = float(rng.uniform(0.0, 0.4))
            w = rng.uniform(0.2, 1.0, size=k)
            w *= (1.0 - fail) / w.sum()
            probs = {int(t): float(p) for t, p in zip(targets, w)}
            specs.append((i, int(targets[0]), float(rng.uniform(1.0, 20.0)),
                          probs, fail))
    return synthetic_graph(n_nodes, specs)


def enumerated_optimal_values(graph, goal, j_fail, tol=1e-13):
    """Brute-force optimal node values: min over all stationary policies,
    each evaluated by its own capped fixed-point iteration.  Independent of
    the value-iteration code path."""
    import itertools

    node_ids = sorted(graph.nodes)
    deciders = [i for i in node_ids if i != goal and graph.out_edges.get(i)]
    best = {i: (0.0 if i == goal else j_fail) for i in node_ids}
    pools = [sorted(graph.out_edges[i]) for i in deciders]
    for combo in itertools.product(*pools) if deciders else [()]:
        fb = dict(zip(deciders, combo))
        J = {i: j_fail for i in node_ids}
        J[goal] = 0.0
        for _ in range(200_000):
            delta = 0.0
            for i, eid in fb.items():
                s = graph.edges[eid].stats
                v = s.expected_cost + s.failure_prob * j_fail
                v += sum(p * J[t] for t, p in s.transition_probs.items())
                v = min(j_fail, v)
                delta = max(delta, abs(v - J[i]))
                J[i] = v
            if delta < tol:
                break
        for i in node_ids:
            best[i] = min(best[i], J[i])
    return best


def simulate_chain_success(graph, feedback, goal, start, n_runs, seed,
                           max_hops=100_000):
    """Monte-Carlo estimate of P(reach goal) walking the edge outcome
    distributions directly; unabsorbed mass is a terminal failure."""
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(n_runs):
        node = start
        for _ in range(max_hops):
            if node == goal:
                wins += 1
                break
            eid = feedback.get(node)
            if eid is None:
                break
            s = graph.edges[eid].stats
            r = rng.random()
            acc = 0.0
            nxt = None
            for t in sorted(s.transition_probs):
                acc += s.transition_probs[t]
                if r < acc:
                    nxt = t
                    break
            if nxt is None:
                break
            node = nxt
    return wins / n_runs


def small_world():
    """6x6 room, one central block, corner landmarks; a 2x2 grid of node
    points is fully viable and the two diagonals are blocked."""
    from firmslap.models import Landmark
    from firmslap.world import Polygon, RobotSpec, WorldModel

    robot = RobotSpec(kind="omni", v_max=1.0, omega_max=1.0, dt=0.1,
                      radius=0.3, fov_half_angle=np.pi, sense_range=2.0)
    block = Polygon([[2.2, 2.2], [3.8, 2.2], [3.8, 3.8], [2.2, 3.8]])
    lms = [Landmark(0, 0.5, 0.5, np.pi / 4), Landmark(1, 5.5, 5.5, -3 * np.pi / 4),
           Landmark(2, 5.5, 0.5, 3 * np.pi / 4), Landmark(3, 0.5, 5.5, -np.pi / 4)]
    return WorldModel((0, 0, 6, 6), [block], [], lms, robot)


SMALL_PCFG = PlannerConfig(n_mc=8, k_neighbors=3, workers=1)
SMALL_BUILD_SEED = 5
