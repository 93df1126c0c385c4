"""Reference environments and scripted scenarios.

Design notes that the coordinates below encode:

* Narrow passages are 1.25 m wide everywhere.
* The lost-localization monitor compares raw range innovations (meters)
  against a threshold, and range noise grows ~0.1/m, so layouts keep the
  landmarks a robot can see at once within a few meters; experiments on
  the open layouts (office thoroughfares, the empty grid) pass a larger
  r_max to the execution config instead.
* Node grids place points at cell centers, so passage gaps are centered
  on grid columns; otherwise no collision-free edge crosses them.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .executor import RunEvent, Scenario
from .models import Landmark, MotionNoiseParams
from .world import Door, Polygon, RobotSpec, WorldModel, save_environment


def rect(x0: float, y0: float, x1: float, y1: float) -> Polygon:
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def wall_landmarks(first_id: int, p0, p1, normal_deg: float,
                   spacing: float) -> list[Landmark]:
    """Landmarks every `spacing` meters along the segment p0 -> p1, pushed
    slightly off the wall along the outward normal."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    length = float(np.linalg.norm(p1 - p0))
    n = max(1, int(round(length / spacing)))
    ts = (np.arange(n) + 0.5) / n
    normal = np.radians(normal_deg)
    off = 0.05 * np.array([np.cos(normal), np.sin(normal)])
    out = []
    for k, t in enumerate(ts):
        q = p0 + t * (p1 - p0) + off
        out.append(Landmark(first_id + k, float(q[0]), float(q[1]),
                            float(normal)))
    return out


def _omni_robot(radius: float = 0.4,
                motion_noise: MotionNoiseParams | None = None) -> RobotSpec:
    kw = {} if motion_noise is None else {"motion_noise": motion_noise}
    return RobotSpec(kind="omni", v_max=1.0, omega_max=1.0, dt=0.1,
                     radius=radius, fov_half_angle=float(np.pi),
                     sense_range=2.0, **kw)


# --- office -------------------------------------------------------------------


def office_21x21() -> WorldModel:
    """21 m x 21 m office: four rooms around an east-west corridor, two
    north-south narrow passages P1 (west, landmark-sparse mouth) and P2
    (east, landmark-dense mouth), and clutter that breaks up sight lines.

    Passage gaps sit at x=4.5 and x=16.5 so that 3 m node-grid columns run
    straight through them.
    """
    obstacles = [
        # east-west dividing wall; gaps P1 x in (3.875, 5.125), P2 x in (15.875, 17.125)
        rect(0.0, 10.0, 3.875, 11.0),
        rect(5.125, 10.0, 15.875, 11.0),
        rect(17.125, 10.0, 21.0, 11.0),
        # north-south dividers with wide (4 m) interior doorways
        rect(10.0, 0.0, 11.0, 6.0),
        rect(10.0, 15.0, 11.0, 21.0),
        # room clutter
        rect(4.0, 3.0, 6.0, 5.0),
        rect(15.0, 3.0, 17.0, 5.0),
        rect(4.0, 16.0, 6.0, 18.0),
        rect(15.0, 16.0, 17.0, 18.0),
        # thoroughfare clutter keeping east-west views short
        rect(6.5, 7.0, 7.5, 8.5),
        rect(13.5, 12.5, 14.5, 14.0),
    ]
    lms: list[Landmark] = []

    def add(p0, p1, normal_deg, spacing):
        first = lms[-1].id + 1 if lms else 0
        lms.extend(wall_landmarks(first, p0, p1, normal_deg, spacing))

    # Perimeter, facing inward.
    add((0, 0), (21, 0), 90.0, 3.0)
    add((0, 21), (21, 21), -90.0, 3.0)
    add((0, 0), (0, 21), 0.0, 3.0)
    add((21, 0), (21, 21), 180.0, 3.0)
    # Dividing wall faces.
    add((0, 10), (3.875, 10), -90.0, 3.0)
    add((5.125, 10), (15.875, 10), -90.0, 3.0)
    add((17.125, 10), (21, 10), -90.0, 3.0)
    add((0, 11), (3.875, 11), 90.0, 3.0)
    add((5.125, 11), (15.875, 11), 90.0, 3.0)
    add((17.125, 11), (21, 11), 90.0, 3.0)
    # Vertical divider faces.
    add((10, 0), (10, 6), 180.0, 3.0)
    add((11, 0), (11, 6), 0.0, 3.0)
    add((10, 15), (10, 21), 180.0, 3.0)
    add((11, 15), (11, 21), 0.0, 3.0)
    # Clutter block faces.
    for (x0, y0, x1, y1) in ((4, 3, 6, 5), (15, 3, 17, 5), (4, 16, 6, 18),
                             (15, 16, 17, 18), (6.5, 7, 7.5, 8.5),
                             (13.5, 12.5, 14.5, 14)):
        add((x0, y0), (x1, y0), -90.0, 3.0)
        add((x0, y1), (x1, y1), 90.0, 3.0)
        add((x0, y0), (x0, y1), 180.0, 3.0)
        add((x1, y0), (x1, y1), 0.0, 3.0)
    # Asymmetric information: P2's mouths are beacon-dense, P1's are bare.
    add((15.875, 9.6), (17.125, 9.6), -90.0, 0.7)
    add((15.875, 11.4), (17.125, 11.4), 90.0, 0.7)

    return WorldModel((0.0, 0.0, 21.0, 21.0), obstacles, [], lms,
                      _omni_robot())


OFFICE_POINTS = {
    "A": np.array([1.5, 1.5, 0.0]),
    "B": np.array([19.5, 1.5, 0.0]),
    "C": np.array([19.5, 19.5, 0.0]),
    "D": np.array([1.5, 19.5, 0.0]),
    "E": np.array([10.5, 7.5, 0.0]),
}


def office_patrol() -> Scenario:
    """Visit B, C, D, E in order from A."""
    p = OFFICE_POINTS
    return Scenario(p["A"], [p["B"], p["C"], p["D"], p["E"]], [],
                    max_ticks=12_000)


# --- two-door room --------------------------------------------------------------


def two_doors() -> WorldModel:
    """A room with two exits toward one goal: the front door leads to a
    short route whose narrow passage runs dark (no beacons on approach),
    the back door to a long corridor lined with beacons.  The back-door
    passage is a toggleable door; a second door sits beside the corridor
    where the route passes within sensing range but never uses it."""
    obstacles = [
        # room shell: x in [1,8], y in [5,11]; walls 0.3 thick
        rect(1.0, 10.7, 8.0, 11.0),                    # top
        rect(1.0, 5.0, 1.3, 11.0),                     # left
        rect(1.0, 5.0, 2.5, 5.3),                      # bottom, west of back door
        rect(3.75, 5.0, 8.0, 5.3),                     # bottom, east of back door
        rect(7.7, 5.0, 8.0, 7.0),                      # right, south of front door
        rect(7.7, 8.25, 8.0, 11.0),                    # right, north of front door
        # long block separating the corridor from the front-door apron
        rect(5.0, 3.4, 10.75, 4.5),
        # walls forming the front narrow passage: a 1.65 m long tunnel,
        # gap y in (7.05, 8.0), crossed in the dark
        rect(10.75, 3.4, 12.4, 7.05),
        rect(10.75, 8.0, 12.4, 12.0),
        # corridor south wall
        rect(1.0, 1.5, 14.0, 1.8),
    ]
    doors = [
        Door("back", rect(2.5, 5.0, 3.75, 5.3), "open", "open"),
        # side door in the block; opens into a 0.5 m pocket no route can use
        Door("side", rect(6.0, 3.4, 7.25, 4.5), "closed", "closed"),
    ]
    lms: list[Landmark] = []

    def add(p0, p1, normal_deg, spacing, first=None):
        first = (lms[-1].id + 1 if lms else 0) if first is None else first
        lms.extend(wall_landmarks(first, p0, p1, normal_deg, spacing))

    # Inside the room.
    add((1.3, 10.7), (7.7, 10.7), -90.0, 2.2)
    add((1.3, 5.3), (7.7, 5.3), 90.0, 2.6)
    add((1.3, 5.3), (1.3, 10.7), 0.0, 2.6)
    # Back route: dense beacons along both corridor faces and the door mouth.
    add((1.0, 1.8), (14.0, 1.8), 90.0, 1.3)
    add((5.0, 3.4), (10.75, 3.4), -90.0, 1.3)
    add((2.4, 4.9), (3.85, 4.9), -90.0, 0.7)
    # East zone: beacons past the corridor exit, kept low so the front
    # passage's sight slit barely reaches them, plus two high ones that
    # only the gap interior and the goal can see.
    add((14.2, 2.0), (15.8, 2.0), 90.0, 0.9)
    add((15.95, 2.5), (15.95, 5.5), 180.0, 1.0)
    add((12.6, 10.0), (13.6, 10.6), -90.0, 0.6)
    # Front route: two beacons hugging the wall north/south of the door,
    # outside the apron's through-door sight cone; the approach to the
    # narrow passage runs dark.
    add((7.3, 9.3), (7.3, 9.3), 180.0, 1.0)
    add((7.3, 5.9), (7.3, 5.9), 180.0, 1.0)

    # Noisier actuation than the default: odometry drift across the unlit
    # front apron is what separates the two routes.
    noise = MotionNoiseParams(eta=0.12, sigma_b_v=0.04, sigma_b_omega=0.002)
    return WorldModel((0.0, 0.0, 16.0, 12.0), obstacles, doors, lms,
                      _omni_robot(0.35, noise))


TWO_DOORS_POINTS = {
    "start": np.array([2.2, 9.5, 0.0]),
    "goal": np.array([13.6, 7.3, 0.0]),
}

TWO_DOORS_NODES = np.array([
    [2.2, 9.5, 0.0],     # 0 start, room NW
    [5.6, 9.3, 0.0],     # 1 room NE
    [3.125, 6.3, 0.0],   # 2 room S, directly above the back door
    [6.8, 7.6, 0.0],     # 3 room E, front-door approach
    [3.125, 2.65, 0.0],  # 4 below the back door, on the corridor
    [6.9, 2.6, 0.0],     # 5 corridor
    [10.2, 2.6, 0.0],    # 6 corridor
    [13.0, 2.6, 0.0],    # 7 corridor exit
    [12.7, 7.5, 0.0],    # 8 east mouth of the front passage
    [13.6, 7.3, 0.0],    # 9 goal
])


def two_doors_task() -> Scenario:
    return Scenario(TWO_DOORS_POINTS["start"], [TWO_DOORS_POINTS["goal"]], [],
                    max_ticks=6_000)


def two_doors_door_closes(close_tick: int = 1) -> Scenario:
    """The preferred back door turns out to be closed."""
    ev = [RunEvent(close_tick, "toggle_door", {"id": "back"})]
    return Scenario(TWO_DOORS_POINTS["start"], [TWO_DOORS_POINTS["goal"]], ev,
                    max_ticks=6_000)


def two_doors_far_toggle(toggle_tick: int = 40) -> Scenario:
    """The useless side door opens while the robot walks the corridor."""
    ev = [RunEvent(toggle_tick, "toggle_door", {"id": "side"})]
    return Scenario(TWO_DOORS_POINTS["start"], [TWO_DOORS_POINTS["goal"]], ev,
                    max_ticks=6_000)


# --- compact room for recovery experiments ----------------------------------------


def kidnap_room() -> WorldModel:
    """6 m x 6 m room with a central beacon cluster: every pose sees all
    four beacons within ~4.5 m, so the default innovation thresholds have
    a wide safety margin, while a corner-to-corner teleport moves the robot
    well over 3 m."""
    lms = [Landmark(0, 2.5, 2.5, 0.0), Landmark(1, 3.5, 2.5, 0.0),
           Landmark(2, 2.5, 3.5, 0.0), Landmark(3, 3.5, 3.5, 0.0)]
    return WorldModel((0.0, 0.0, 6.0, 6.0), [], [], lms, _omni_robot(0.25))


def kidnap_scenario(dest=(3.0, 4.5), tick: int = 10) -> Scenario:
    """Walk the south wall; early on, the robot is teleported well over
    3 m away to a spot far from every roadmap node (the room's roadmap is
    the two south nodes), so recovery must insert an in-place node even
    with some post-recovery estimate bias."""
    ev = [RunEvent(tick, "kidnap",
                   {"x": float(dest[0]), "y": float(dest[1]), "theta": 0.0})]
    return Scenario(np.array([1.0, 1.0, 0.0]), [np.array([4.5, 1.5, 0.0])],
                    ev, max_ticks=4_000)


# --- empty grid for complexity studies ----------------------------------------------


def empty_grid(side: float = 21.0, lm_grid: int = 4) -> WorldModel:
    """Obstacle-free square with a lattice of beacons.  Sight lines span
    the whole map, so runs here use a relaxed r_max."""
    lms = []
    step = side / lm_grid
    k = 0
    for i in range(lm_grid):
        for j in range(lm_grid):
            lms.append(Landmark(k, (i + 0.5) * step, (j + 0.5) * step, 0.0))
            k += 1
    return WorldModel((0.0, 0.0, side, side), [], [], lms, _omni_robot())


def grid_crossing(side: float = 21.0) -> Scenario:
    m = side - 1.75
    return Scenario(np.array([1.75, 1.75, 0.0]), [np.array([m, m, 0.0])], [],
                    max_ticks=4_000)


# --- multi-event endurance script ------------------------------------------------------


def multi_event_scenario() -> Scenario:
    """One run that exercises every online mechanism: a person blocks the
    corridor mid-transit (sensed, penalized, rerouted around), the robot is
    kidnapped to the far east (recovery + in-place node insertion), and the
    goal is redirected while the robot is still relocalizing."""
    p = TWO_DOORS_POINTS
    ev = [
        RunEvent(95, "spawn_transient",
                 {"id": "person", "vertices": [[6.4, 1.8], [7.4, 1.8],
                                               [7.4, 3.4], [6.4, 3.4]]}),
        RunEvent(200, "kidnap", {"x": 14.8, "y": 10.5, "theta": 0.0}),
        RunEvent(230, "set_goal", {"x": p["start"][0], "y": p["start"][1]}),
        RunEvent(260, "remove_transient", {"id": "person"}),
    ]
    return Scenario(p["start"], [p["goal"]], ev, max_ticks=12_000)


# --- fixture file emission --------------------------------------------------------------


FIXTURES = {
    "office_21x21": (office_21x21, office_patrol),
    "two_doors": (two_doors, two_doors_task),
    "kidnap_room": (kidnap_room, kidnap_scenario),
    "empty_grid": (empty_grid, grid_crossing),
}


def write_fixtures(out_dir) -> list[Path]:
    """Write every reference environment and its default scenario."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (world_fn, scen_fn) in FIXTURES.items():
        env_path = out / f"{name}.env.json"
        save_environment(world_fn(), env_path)
        scen_path = out / f"{name}.scenario.json"
        scen_fn().save(scen_path)
        written += [env_path, scen_path]
    extra = out / "two_doors_multi_event.scenario.json"
    multi_event_scenario().save(extra)
    written.append(extra)
    return written
