"""Session-scoped roadmap builds shared across test files.

Graph construction dominates suite runtime (Monte-Carlo edge evaluation),
so each reference roadmap is built once per session and tests work on
clones.  Nothing here mutates a shared object: runs go through
run_scenario, which copies both the world and the graph.
"""

import time

import numpy as np
import pytest

from firmslap.executor import run_scenario
from firmslap.fixtures import (TWO_DOORS_NODES, empty_grid, grid_crossing,
                               kidnap_room, office_21x21, office_patrol,
                               two_doors)
from firmslap.graph import build_graph, sample_nodes
from firmslap.metrics import batch_compare

from helpers import (GRID_BUILD_SEED, GRID_CONNECT_RADIUS, GRID_ECFG,
                     GRID_PCFG, GRID_SEEDS, KIDNAP_NODES, KIDNAP_PCFG,
                     OFFICE_BUILD_SEED, OFFICE_FIRM_ECFG, OFFICE_NODES_REQUESTED,
                     OFFICE_PCFG, OFFICE_ROLLOUT_ECFG, OFFICE_TREND_SEEDS,
                     TWO_DOORS_BUILD_SEED, TWO_DOORS_PCFG, run_checks_total)


@pytest.fixture(scope="session")
def two_doors_world():
    return two_doors()


@pytest.fixture(scope="session")
def two_doors_graph(two_doors_world):
    return build_graph(two_doors_world, TWO_DOORS_NODES, TWO_DOORS_PCFG,
                       seed=TWO_DOORS_BUILD_SEED)


@pytest.fixture(scope="session")
def kidnap_graph():
    world = kidnap_room()
    return build_graph(world, KIDNAP_NODES, KIDNAP_PCFG, seed=2)


@pytest.fixture(scope="session")
def office_graph():
    world = office_21x21()
    pts = sample_nodes(world, OFFICE_NODES_REQUESTED, "grid",
                       seed=OFFICE_BUILD_SEED)
    return build_graph(world, pts, OFFICE_PCFG, seed=OFFICE_BUILD_SEED)


@pytest.fixture(scope="session")
def office_trend(office_graph):
    """50 matched seeds under both policies, with decision logs retained."""
    t0 = time.monotonic()
    cmp = batch_compare(office_graph.world, office_graph, office_patrol(),
                        OFFICE_PCFG,
                        {"firm": OFFICE_FIRM_ECFG, "rollout": OFFICE_ROLLOUT_ECFG},
                        seeds=OFFICE_TREND_SEEDS)
    elapsed = time.monotonic() - t0
    return cmp, elapsed


def _grid_build(n: int):
    world = empty_grid()
    pts = sample_nodes(world, n, "grid", seed=GRID_BUILD_SEED)
    graph = build_graph(world, pts, GRID_PCFG, seed=GRID_BUILD_SEED,
                        connect_radius=GRID_CONNECT_RADIUS)
    return world, graph


@pytest.fixture(scope="session")
def grid_complexity():
    """Per-instant and per-run believed-map check counts at N and 2N."""
    out = {}
    for n in (49, 98):
        world, graph = _grid_build(n)
        per_instant: list[int] = []
        per_run: list[int] = []
        for seed in GRID_SEEDS:
            rec = run_scenario(world, graph, grid_crossing(), GRID_PCFG,
                               GRID_ECFG, seed)
            assert rec.outcome == "success", f"grid N={n} seed {seed}: {rec.outcome}"
            per_instant.extend(int(d["collision_checks"]) for d in rec.decisions
                               if "collision_checks" in d)
            per_run.append(run_checks_total(rec))
        out[n] = {"graph": graph, "world": world,
                  "per_instant": np.array(per_instant, dtype=float),
                  "per_run": np.array(per_run, dtype=float)}
    return out


@pytest.fixture(scope="session")
def small_graph():
    """Tiny 4-node roadmap over helpers.small_world, shared by the graph,
    rollout and executor tests."""
    from helpers import SMALL_BUILD_SEED, SMALL_PCFG, small_world

    w = small_world()
    pts = sample_nodes(w, 4, "grid", seed=0)
    return build_graph(w, pts, SMALL_PCFG, seed=SMALL_BUILD_SEED)
