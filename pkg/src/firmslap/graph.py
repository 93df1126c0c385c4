"""Belief roadmap: nodes, edge statistics, dynamic programming, persistence.

Nodes are stationary beliefs of frozen local filters with a region around
each; edges are slide-funnel controllers whose transition probabilities and
expected costs come from seeded Monte-Carlo simulation.  The graph policy
is solved by value iteration over node values with an absorbing failure
state, and per-node success probabilities follow from the absorbing-chain
identity on the policy's transition matrix.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .beliefs import BeliefRegion, GaussianBelief, angle_diff
from .config import CostWeights, PlannerConfig, one_step_cost  # noqa: F401  (re-export)
from .control import LocalController, execute_edge, make_controller, plan_nominal, trajectory_clear
from .estimation import NodeFilter, UnobservableNodeError, stationary_kf
from .models import observe
from .rng import DOMAIN_EDGE_MC, DOMAIN_INSERT_MC, DOMAIN_NODE_SAMPLING, substream
from .world import SimEnv, WorldModel, environment_doc, environment_from_doc, sim_env_static

GRAPH_SCHEMA = "firmslap-graph/1"


class ConstructionError(RuntimeError):
    """Roadmap construction could not satisfy its postconditions."""


class DPConvergenceError(RuntimeError):
    """Value iteration failed to converge within the sweep budget."""


@dataclass(frozen=True)
class FirmNode:
    id: int
    point: np.ndarray
    nf: NodeFilter
    region: BeliefRegion
    stabilizer: LocalController

    @property
    def belief(self) -> GaussianBelief:
        return GaussianBelief(self.point, self.nf.P_plus)


@dataclass
class EdgeStats:
    expected_cost: float
    transition_probs: dict[int, float]
    failure_prob: float
    sample_count: int

    def as_dict(self) -> dict:
        return {"expected_cost": self.expected_cost,
                "transition_probs": {str(k): v for k, v in sorted(self.transition_probs.items())},
                "failure_prob": self.failure_prob,
                "sample_count": self.sample_count}

    @staticmethod
    def from_dict(d: dict) -> "EdgeStats":
        return EdgeStats(float(d["expected_cost"]),
                         {int(k): float(v) for k, v in d["transition_probs"].items()},
                         float(d["failure_prob"]), int(d["sample_count"]))


@dataclass
class FirmEdge:
    id: int
    source: int
    target: int
    controller: LocalController
    stats: EdgeStats | None = None
    baseline_stats: EdgeStats | None = None
    overridden: bool = False


@dataclass(frozen=True)
class FirmPolicy:
    goal: int
    cost_to_go: dict[int, float]
    feedback: dict[int, int]          # node id -> chosen outgoing edge id
    success: dict[int, float]


class FirmGraph:
    def __init__(self, world: WorldModel, cfg: PlannerConfig, seed: int):
        self.world = world
        self.cfg = cfg
        self.seed = seed
        self.nodes: dict[int, FirmNode] = {}
        self.edges: dict[int, FirmEdge] = {}
        self.out_edges: dict[int, list[int]] = {}

    # -- node/edge bookkeeping ------------------------------------------

    def add_node(self, node: FirmNode) -> None:
        self.nodes[node.id] = node
        self.out_edges.setdefault(node.id, [])

    def add_edge(self, edge: FirmEdge) -> None:
        self.edges[edge.id] = edge
        self.out_edges[edge.source].append(edge.id)

    def next_node_id(self) -> int:
        return max(self.nodes, default=-1) + 1

    def next_edge_id(self) -> int:
        return max(self.edges, default=-1) + 1

    def clone(self) -> "FirmGraph":
        """Independent copy for one run: shares the immutable nodes and
        controllers, copies the mutable edge statistics."""
        g = FirmGraph(self.world, self.cfg, self.seed)
        g.nodes = dict(self.nodes)
        g.out_edges = {k: list(v) for k, v in self.out_edges.items()}
        for e in self.edges.values():
            c = FirmEdge(e.id, e.source, e.target, e.controller)
            if e.stats is not None:
                c.stats = EdgeStats(e.stats.expected_cost,
                                    dict(e.stats.transition_probs),
                                    e.stats.failure_prob, e.stats.sample_count)
            if e.baseline_stats is not None:
                c.baseline_stats = EdgeStats(e.baseline_stats.expected_cost,
                                             dict(e.baseline_stats.transition_probs),
                                             e.baseline_stats.failure_prob,
                                             e.baseline_stats.sample_count)
            c.overridden = e.overridden
            g.edges[e.id] = c
        return g

    def node_points(self) -> np.ndarray:
        ids = sorted(self.nodes)
        return np.array([self.nodes[i].point for i in ids]), np.array(ids)

    def nearest_node(self, xy: np.ndarray) -> int:
        pts, ids = self.node_points()
        d = np.linalg.norm(pts[:, :2] - np.asarray(xy)[None, :2], axis=1)
        return int(ids[int(np.argmin(d))])

    def neighbors_within(self, xy: np.ndarray, radius: float) -> list[int]:
        pts, ids = self.node_points()
        d = np.linalg.norm(pts[:, :2] - np.asarray(xy)[None, :2], axis=1)
        return [int(i) for i in ids[d <= radius]]

    def dispersion(self) -> float:
        """Mean nearest-neighbor spacing between node points."""
        pts, _ = self.node_points()
        if pts.shape[0] < 2:
            return 1.0
        d = np.linalg.norm(pts[:, None, :2] - pts[None, :, :2], axis=2)
        np.fill_diagonal(d, np.inf)
        return float(np.mean(np.min(d, axis=1)))

    # -- region membership ----------------------------------------------

    def make_absorb(self):
        """Vectorized region-membership closure over a snapshot of the nodes.

        Returns node id of the first region containing the belief (lowest
        id on simultaneous hits), or None.  Must be rebuilt after node
        insertion.
        """
        ids = np.array(sorted(self.nodes))
        centers = np.array([self.nodes[i].point for i in ids])
        pos_r2 = np.array([self.nodes[i].region.pos_radius for i in ids]) ** 2
        ang_r = np.array([self.nodes[i].region.ang_radius for i in ids])
        cov_r = np.array([self.nodes[i].region.cov_radius for i in ids])
        covs = np.array([self.nodes[i].nf.P_plus for i in ids]).reshape(len(ids), 9)

        def absorb(belief: GaussianBelief, exclude: int | None = None) -> int | None:
            m = belief.mean
            d2 = (centers[:, 0] - m[0]) ** 2 + (centers[:, 1] - m[1]) ** 2
            cand = d2 <= pos_r2
            if exclude is not None:
                cand &= ids != exclude
            if not cand.any():
                return None
            da = np.abs(np.mod(centers[:, 2] - m[2] + np.pi, 2.0 * np.pi) - np.pi)
            cand &= da <= ang_r
            if not cand.any():
                return None
            dc = np.linalg.norm(covs[cand] - belief.cov.reshape(9)[None, :], axis=1)
            hits = ids[cand][dc <= cov_r[cand]]
            return int(hits.min()) if hits.size else None

        return absorb


# --- sampling ----------------------------------------------------------------


def _node_viable(point: np.ndarray, env: SimEnv) -> bool:
    if env.geom.collides(point):
        return False
    visible = observe(point, env.landmarks, env.fov, env.obs_params)
    if not visible:
        return False
    try:
        stationary_kf(point, env.model, visible, env.obs_params, env.dt)
    except UnobservableNodeError:
        return False
    return True


def sample_nodes(world: WorldModel, n: int, strategy: str, seed: int,
                 max_attempts_per_node: int = 200) -> np.ndarray:
    """Sample node configurations that can host a stationary filter.

    grid: headings 0, cell centers of the smallest square grid with at
    least n cells; cells whose center is in collision or cannot host a
    converging filter are dropped.  uniform: rejection sampling.
    """
    if n < 2:
        raise ConstructionError("need at least 2 nodes")
    env = sim_env_static(world)
    xmin, ymin, xmax, ymax = world.bounds
    if strategy == "grid":
        m = int(np.ceil(np.sqrt(n)))
        xs = xmin + (np.arange(m) + 0.5) * (xmax - xmin) / m
        ys = ymin + (np.arange(m) + 0.5) * (ymax - ymin) / m
        pts = [np.array([x, y, 0.0]) for y in ys for x in xs]
        out = [p for p in pts if _node_viable(p, env)][:n]
        if len(out) < 2:
            raise ConstructionError("grid sampling produced fewer than 2 viable nodes")
        return np.array(out)
    if strategy == "uniform":
        rng = substream(seed, DOMAIN_NODE_SAMPLING)
        out = []
        for _ in range(max_attempts_per_node * n):
            p = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax),
                          rng.uniform(-np.pi, np.pi)])
            if _node_viable(p, env):
                out.append(p)
                if len(out) == n:
                    return np.array(out)
        raise ConstructionError(f"could not place {n} viable nodes")
    raise ConstructionError(f"unknown sampling strategy {strategy!r}")


# --- construction ------------------------------------------------------------


def _build_node(node_id: int, point: np.ndarray, env: SimEnv, cfg: PlannerConfig) -> FirmNode:
    visible = observe(point, env.landmarks, env.fov, env.obs_params)
    nf = stationary_kf(point, env.model, visible, env.obs_params, env.dt)
    cov_radius = cfg.cov_radius_factor * float(np.linalg.norm(nf.P_plus, ord="fro"))
    region = BeliefRegion(GaussianBelief(point, nf.P_plus), cfg.mean_radius,
                          cfg.ang_radius, cov_radius)
    stab = make_controller(node_id, node_id, point, nf, env.model, env.dt,
                           cfg.olfc_period, cfg.max_steps_factor, cfg.max_steps_floor)
    return FirmNode(node_id, np.asarray(point, dtype=float), nf, region, stab)


def evaluate_edge(env: SimEnv, edge: FirmEdge, b0: GaussianBelief, absorb,
                  n_mc: int, seed: int, domain: int, weights: CostWeights,
                  noiseless: bool = False) -> EdgeStats:
    """Monte-Carlo transition statistics for one edge controller.

    Sample i draws from the substream (seed, domain, edge id, i), so the
    result is independent of evaluation order and thread assignment.
    """
    counts: dict[int, int] = {}
    failures = 0
    total_cost = 0.0
    for i in range(n_mc):
        rng = substream(seed, domain, edge.id, i)
        res = execute_edge(env, edge.controller, b0, absorb, rng, weights,
                           noiseless=noiseless)
        total_cost += res.cost
        if res.outcome == "absorbed":
            counts[res.node_id] = counts.get(res.node_id, 0) + 1
        else:
            failures += 1
    return EdgeStats(expected_cost=total_cost / n_mc,
                     transition_probs={k: v / n_mc for k, v in sorted(counts.items())},
                     failure_prob=failures / n_mc,
                     sample_count=n_mc)


def build_graph(world: WorldModel, points: np.ndarray, cfg: PlannerConfig,
                seed: int, connect_radius: float | None = None) -> FirmGraph:
    """Construct and evaluate the roadmap over the given node configurations.

    Neighbors are the k nearest by position (or all nodes within
    connect_radius when given).  Edges whose straight nominal is blocked by
    static geometry are skipped.  Edge evaluation fans out to a thread pool
    when cfg.workers > 1; results are bit-identical either way.
    """
    g = FirmGraph(world, cfg, seed)
    env = sim_env_static(world)
    for node_id, point in enumerate(points):
        try:
            g.add_node(_build_node(node_id, point, env, cfg))
        except UnobservableNodeError as exc:
            raise ConstructionError(f"node {node_id} not constructible: {exc}") from exc

    pts = np.array([g.nodes[i].point for i in sorted(g.nodes)])
    n = pts.shape[0]
    dists = np.linalg.norm(pts[:, None, :2] - pts[None, :, :2], axis=2)
    edge_id = 0
    for i in range(n):
        order = sorted((dists[i, j], j) for j in range(n) if j != i)
        if connect_radius is not None:
            nbrs = [j for d, j in order if d <= connect_radius]
        else:
            nbrs = [j for _, j in order[:cfg.k_neighbors]]
        for j in nbrs:
            traj = plan_nominal(g.nodes[i].point, g.nodes[j].point, env.model, env.dt)
            if not trajectory_clear(traj, env.geom):
                continue
            ctrl = make_controller(i, j, g.nodes[i].point, g.nodes[j].nf, env.model,
                                   env.dt, cfg.olfc_period, cfg.max_steps_factor,
                                   cfg.max_steps_floor)
            g.add_edge(FirmEdge(edge_id, i, j, ctrl))
            edge_id += 1

    absorb = g.make_absorb()

    def run(eid: int) -> tuple[int, EdgeStats]:
        e = g.edges[eid]
        stats = evaluate_edge(env, e, g.nodes[e.source].belief, absorb, cfg.n_mc,
                              seed, DOMAIN_EDGE_MC, cfg.weights, cfg.noiseless)
        return eid, stats

    ids = sorted(g.edges)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = dict(pool.map(run, ids))
    else:
        results = dict(map(run, ids))
    for eid, stats in results.items():
        g.edges[eid].stats = stats
        g.edges[eid].baseline_stats = EdgeStats(stats.expected_cost,
                                                dict(stats.transition_probs),
                                                stats.failure_prob, stats.sample_count)
    return g


# --- dynamic programming ------------------------------------------------------


def solve_dp(graph: FirmGraph, goal: int, j_fail: float | None = None,
             tol: float | None = None, max_sweeps: int | None = None) -> FirmPolicy:
    """Value iteration for node values with an absorbing failure state.

    Values are capped at j_fail (a node may always give up), which keeps
    the iteration convergent on graphs with unreachable components.  The
    feedback picks the argmin edge per node, ties broken by lowest edge id.
    """
    cfg = graph.cfg
    j_fail = cfg.j_fail if j_fail is None else j_fail
    tol = cfg.dp_tol if tol is None else tol
    max_sweeps = cfg.dp_max_sweeps if max_sweeps is None else max_sweeps
    if goal not in graph.nodes:
        raise KeyError(f"goal node {goal} not in graph")

    J = {i: j_fail for i in graph.nodes}
    J[goal] = 0.0

    def edge_value(e: FirmEdge, J: dict[int, float]) -> float:
        s = e.stats
        v = s.expected_cost + s.failure_prob * j_fail
        for target, p in s.transition_probs.items():
            v += p * J[target]
        return v

    for _ in range(max_sweeps):
        delta = 0.0
        J_new = dict(J)
        for i in graph.nodes:
            if i == goal:
                continue
            eids = graph.out_edges.get(i, [])
            if not eids:
                continue
            best = min(edge_value(graph.edges[eid], J) for eid in eids)
            J_new[i] = min(j_fail, best)
            delta = max(delta, abs(J_new[i] - J[i]))
        J = J_new
        if delta < tol:
            break
    else:
        raise DPConvergenceError(f"value iteration above tol after {max_sweeps} sweeps")

    feedback: dict[int, int] = {}
    for i in graph.nodes:
        if i == goal:
            continue
        eids = sorted(graph.out_edges.get(i, []))
        if not eids:
            continue
        if J[i] >= j_fail:
            # Saturated node: giving up (holding position) is as good as any
            # edge, so prescribe no motion rather than an arbitrary argmin.
            continue
        vals = [(edge_value(graph.edges[eid], J), eid) for eid in eids]
        feedback[i] = min(vals)[1]

    success = success_probabilities(graph, feedback, goal)
    return FirmPolicy(goal=goal, cost_to_go=J, feedback=feedback, success=success)


def success_probabilities(graph: FirmGraph, feedback: dict[int, int],
                          goal: int) -> dict[int, float]:
    """P(reach goal before failing) per node under the feedback.

    Absorbing-chain identity: with T the transient-to-transient transition
    matrix under the policy and r the per-node one-step probability of
    entering the goal region, success = (I - T)^-1 r.
    """
    transient = [i for i in sorted(graph.nodes) if i != goal and i in feedback]
    index = {i: k for k, i in enumerate(transient)}
    m = len(transient)
    T = np.zeros((m, m))
    r = np.zeros(m)
    for i in transient:
        stats = graph.edges[feedback[i]].stats
        for tgt, p in stats.transition_probs.items():
            if tgt == goal:
                r[index[i]] += p
            elif tgt in index:
                T[index[i], index[tgt]] += p
            # transitions to nodes without a policy contribute no success mass
    try:
        s = np.linalg.solve(np.eye(m) - T, r)
    except np.linalg.LinAlgError:
        s, *_ = np.linalg.lstsq(np.eye(m) - T, r, rcond=None)
    out = {i: float(np.clip(s[index[i]], 0.0, 1.0)) for i in transient}
    out[goal] = 1.0
    for i in graph.nodes:
        out.setdefault(i, 0.0)
    return out


# --- online insertion ---------------------------------------------------------


def insert_node_online(graph: FirmGraph, env: SimEnv, point: np.ndarray,
                       radius: float, n_mc: int, seed: int,
                       goal: int | None = None) -> tuple[int, FirmPolicy | None]:
    """Insert a node at runtime and evaluate its bidirectional edges.

    Existing node and edge statistics are never touched.  A point within
    1e-6 of an existing node is a no-op returning that node.  Returns the
    node id and, when a goal is given, the re-solved policy.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    for node in graph.nodes.values():
        if (np.linalg.norm(node.point[:2] - point[:2]) < 1e-6
                and abs(angle_diff(node.point[2], point[2])) < 1e-6):
            return node.id, (solve_dp(graph, goal) if goal is not None else None)

    cfg = graph.cfg
    node_id = graph.next_node_id()
    node = _build_node(node_id, point, env, cfg)
    graph.add_node(node)
    nbrs = [i for i in graph.neighbors_within(point[:2], radius) if i != node_id]
    new_edges: list[FirmEdge] = []
    for j in sorted(nbrs):
        for (src, dst) in ((node_id, j), (j, node_id)):
            traj = plan_nominal(graph.nodes[src].point, graph.nodes[dst].point,
                                env.model, env.dt)
            if not trajectory_clear(traj, env.geom):
                continue
            ctrl = make_controller(src, dst, graph.nodes[src].point,
                                   graph.nodes[dst].nf, env.model, env.dt,
                                   cfg.olfc_period, cfg.max_steps_factor,
                                   cfg.max_steps_floor)
            edge = FirmEdge(graph.next_edge_id(), src, dst, ctrl)
            graph.add_edge(edge)
            new_edges.append(edge)

    absorb = graph.make_absorb()
    for e in new_edges:
        stats = evaluate_edge(env, e, graph.nodes[e.source].belief, absorb, n_mc,
                              seed, DOMAIN_INSERT_MC, cfg.weights, cfg.noiseless)
        e.stats = stats
        e.baseline_stats = EdgeStats(stats.expected_cost, dict(stats.transition_probs),
                                     stats.failure_prob, stats.sample_count)
    policy = solve_dp(graph, goal) if goal is not None else None
    return node_id, policy


# --- uncertainty-blind baseline ------------------------------------------------


def shortest_path_route(graph: FirmGraph, start: int, goal: int) -> list[int]:
    """Dijkstra over Euclidean edge lengths, ignoring all uncertainty."""
    import heapq
    dist = {start: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, start)]
    seen = set()
    while heap:
        d, i = heapq.heappop(heap)
        if i in seen:
            continue
        seen.add(i)
        if i == goal:
            break
        for eid in graph.out_edges.get(i, []):
            e = graph.edges[eid]
            length = float(np.linalg.norm(graph.nodes[e.target].point[:2]
                                          - graph.nodes[e.source].point[:2]))
            nd = d + length
            if nd < dist.get(e.target, np.inf):
                dist[e.target] = nd
                prev[e.target] = i
                heapq.heappush(heap, (nd, e.target))
    if goal not in dist:
        raise ConstructionError("no path to goal")
    route = [goal]
    while route[-1] != start:
        route.append(prev[route[-1]])
    return route[::-1]


# --- persistence ----------------------------------------------------------------


def save_graph(graph: FirmGraph, path: str | Path) -> None:
    doc = {
        "schema": GRAPH_SCHEMA,
        "seed": graph.seed,
        "config": asdict(graph.cfg),
        "environment": environment_doc(graph.world),
        "nodes": [{
            "id": i,
            "point": [float(v) for v in graph.nodes[i].point],
            "landmark_ids": [lm.id for lm in graph.nodes[i].nf.landmarks],
            "P_minus": graph.nodes[i].nf.P_minus.reshape(-1).tolist(),
            "P_plus": graph.nodes[i].nf.P_plus.reshape(-1).tolist(),
        } for i in sorted(graph.nodes)],
        "edges": [{
            "id": e.id,
            "source": e.source,
            "target": e.target,
            "stats": e.stats.as_dict(),
            "baseline_stats": e.baseline_stats.as_dict(),
            "overridden": e.overridden,
        } for e in (graph.edges[k] for k in sorted(graph.edges))],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


class GraphFormatError(ValueError):
    pass


def load_graph(path: str | Path) -> FirmGraph:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != GRAPH_SCHEMA:
        raise GraphFormatError(f"unsupported graph schema {doc.get('schema')!r}")
    world = environment_from_doc(doc["environment"])
    cfg_d = dict(doc["config"])
    cfg_d["weights"] = CostWeights(**cfg_d["weights"])
    cfg = PlannerConfig(**cfg_d)
    g = FirmGraph(world, cfg, int(doc["seed"]))
    env = sim_env_static(world)
    lms = {lm.id: lm for lm in world.landmarks}
    from .estimation import LinearizedSystem
    from .models import obs_jacobian, obs_noise_cov
    for nd in doc["nodes"]:
        point = np.array(nd["point"], dtype=float)
        node_lms = tuple(lms[i] for i in nd["landmark_ids"])
        u0 = env.model.zero_control()
        A, B, G = env.model.jacobians(point, u0, env.dt)
        Q = env.model.process_noise_cov(u0)
        H = np.vstack([obs_jacobian(point, lm) for lm in node_lms])
        R = np.zeros((2 * len(node_lms), 2 * len(node_lms)))
        for k, lm in enumerate(node_lms):
            R[2 * k:2 * k + 2, 2 * k:2 * k + 2] = obs_noise_cov(point, lm, env.obs_params)
        nf = NodeFilter(point=point,
                        system=LinearizedSystem(A, B, G, Q, H, np.eye(H.shape[0]), R),
                        landmarks=node_lms,
                        P_minus=np.array(nd["P_minus"]).reshape(3, 3),
                        P_plus=np.array(nd["P_plus"]).reshape(3, 3))
        cov_radius = cfg.cov_radius_factor * float(np.linalg.norm(nf.P_plus, ord="fro"))
        region = BeliefRegion(GaussianBelief(point, nf.P_plus), cfg.mean_radius,
                              cfg.ang_radius, cov_radius)
        stab = make_controller(nd["id"], nd["id"], point, nf, env.model, env.dt,
                               cfg.olfc_period, cfg.max_steps_factor, cfg.max_steps_floor)
        g.add_node(FirmNode(int(nd["id"]), point, nf, region, stab))
    for ed in doc["edges"]:
        src, dst = int(ed["source"]), int(ed["target"])
        ctrl = make_controller(src, dst, g.nodes[src].point, g.nodes[dst].nf,
                               env.model, env.dt, cfg.olfc_period,
                               cfg.max_steps_factor, cfg.max_steps_floor)
        edge = FirmEdge(int(ed["id"]), src, dst, ctrl,
                        stats=EdgeStats.from_dict(ed["stats"]),
                        baseline_stats=EdgeStats.from_dict(ed["baseline_stats"]),
                        overridden=bool(ed["overridden"]))
        g.add_edge(edge)
    return g
