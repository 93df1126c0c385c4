"""Ground-truth world, the planner's belief map, sensing and forgetting.

The world holds static convex obstacles, doors (polygons that toggle
between open and closed), transient obstacles injected by scenario events,
and wall-mounted landmarks.  The planner never reads true door states;
it keeps a BeliefMap that diverges from the world only in door states and
transient obstacles, fed by proximity sensing and aged by forgetting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .beliefs import wrap_angle
from .models import (Landmark, MeasurementBatch, MotionNoiseParams, MotionModel,
                     ObsNoiseParams, fov_mask, in_fov, landmark_arrays,
                     make_model, rb_batch)

ENV_SCHEMA = "firmslap-env/1"

OPEN = "open"
CLOSED = "closed"


class EnvironmentFormatError(ValueError):
    """Environment file failed schema validation."""


class Polygon:
    """Convex polygon with cached edge arrays for fast queries."""

    def __init__(self, vertices: Iterable[Sequence[float]]):
        v = np.asarray(list(vertices), dtype=float).reshape(-1, 2)
        if v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 vertices")
        # Normalize to counter-clockwise order.
        area2 = float(np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1]))
        if area2 < 0:
            v = v[::-1].copy()
        self.vertices = v
        self._a = v
        self._b = np.roll(v, -1, axis=0)
        self._ab = self._b - self._a
        self._ab_len2 = np.einsum("ij,ij->i", self._ab, self._ab)
        cross = self._ab[:, 0] * np.roll(self._ab, -1, axis=0)[:, 1] - \
            self._ab[:, 1] * np.roll(self._ab, -1, axis=0)[:, 0]
        if np.any(cross < -1e-9):
            raise ValueError("polygon not convex")
        self.aabb = (float(v[:, 0].min()), float(v[:, 1].min()),
                     float(v[:, 0].max()), float(v[:, 1].max()))

    def contains(self, p: np.ndarray) -> bool:
        d = p[None, :2] - self._a
        cross = self._ab[:, 0] * d[:, 1] - self._ab[:, 1] * d[:, 0]
        return bool(np.all(cross >= -1e-12))

    def distance(self, p: np.ndarray) -> float:
        """Distance from a point to the polygon; 0 inside."""
        if self.contains(p):
            return 0.0
        d = p[None, :2] - self._a
        t = np.clip(np.einsum("ij,ij->i", d, self._ab) / self._ab_len2, 0.0, 1.0)
        closest = self._a + t[:, None] * self._ab
        return float(np.min(np.linalg.norm(p[None, :2] - closest, axis=1)))

    def disc_hits(self, px: float, py: float, r: float) -> bool:
        """True when a disc of radius r at (px, py) touches the polygon."""
        xmin, ymin, xmax, ymax = self.aabb
        if px < xmin - r or px > xmax + r or py < ymin - r or py > ymax + r:
            return False
        return self.distance(np.array([px, py])) <= r

    def segment_intersects(self, p: np.ndarray, q: np.ndarray) -> bool:
        """True if segment pq crosses the polygon boundary or runs inside it."""
        if self.contains(p) or self.contains(q):
            return True
        r = q - p
        s = self._ab
        qp = self._a - p[None, :]
        denom = r[0] * s[:, 1] - r[1] * s[:, 0]
        num_t = qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]
        num_u = qp[:, 0] * r[1] - qp[:, 1] * r[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num_t / denom
            u = num_u / denom
        hit = (np.abs(denom) > 1e-15) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
        return bool(np.any(hit))

    def segments_hit(self, p: np.ndarray, ends: np.ndarray) -> np.ndarray:
        """Occlusion mask for fan of segments from p to each row of ends.

        Vectorized counterpart of segment_intersects with an AABB prefilter;
        entries whose segment cannot touch the polygon's box are False
        without any edge tests.
        """
        m = ends.shape[0]
        out = np.zeros(m, dtype=bool)
        if m == 0:
            return out
        xmin, ymin, xmax, ymax = self.aabb
        px, py = float(p[0]), float(p[1])
        cand = ~((np.maximum(ends[:, 0], px) < xmin) | (np.minimum(ends[:, 0], px) > xmax)
                 | (np.maximum(ends[:, 1], py) < ymin) | (np.minimum(ends[:, 1], py) > ymax))
        if not np.any(cand):
            return out
        if self.contains(p):
            out[cand] = True
            return out
        q = ends[cand]
        d = q[:, None, :] - self._a[None, :, :]
        cross_in = self._ab[None, :, 0] * d[:, :, 1] - self._ab[None, :, 1] * d[:, :, 0]
        inside = np.all(cross_in >= -1e-12, axis=1)
        r = q - p[None, :]
        s = self._ab
        qp = self._a - p[None, :]
        denom = r[:, 0, None] * s[None, :, 1] - r[:, 1, None] * s[None, :, 0]
        num_t = qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]
        num_u = qp[None, :, 0] * r[:, 1, None] - qp[None, :, 1] * r[:, 0, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num_t[None, :] / denom
            u = num_u / denom
        hit = (np.abs(denom) > 1e-15) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
        out[cand] = inside | np.any(hit, axis=1)
        return out


def point_segment_distance(p: Sequence[float], a: Sequence[float], b: Sequence[float]) -> float:
    """Distance from point p to segment ab (reference implementation)."""
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


@dataclass
class Door:
    id: str
    polygon: Polygon
    state: str = OPEN
    default_state: str = OPEN


@dataclass
class Transient:
    id: str
    polygon: Polygon


@dataclass(frozen=True)
class RobotSpec:
    """Robot body, sensing and kinematics parameters carried by fixtures."""

    kind: str = "unicycle"
    v_max: float = 0.3
    omega_max: float = 1.0
    dt: float = 0.1
    radius: float = 1.0
    fov_half_angle: float = float(np.pi / 2.0)
    sense_range: float = 2.0
    motion_noise: MotionNoiseParams = field(default_factory=MotionNoiseParams)
    obs_noise: ObsNoiseParams = field(default_factory=ObsNoiseParams)

    def make_model(self) -> MotionModel:
        return make_model(self.kind, self.v_max, self.omega_max, self.motion_noise)


class WorldModel:
    """Ground truth: bounds, static obstacles, doors, transients, landmarks."""

    def __init__(self, bounds: Sequence[float], obstacles: Sequence[Polygon],
                 doors: Sequence[Door], landmarks: Sequence[Landmark],
                 robot: RobotSpec = RobotSpec(),
                 regions: dict[str, tuple[float, float, float, float]] | None = None):
        self.bounds = tuple(float(b) for b in bounds)
        if not (self.bounds[0] < self.bounds[2] and self.bounds[1] < self.bounds[3]):
            raise EnvironmentFormatError("degenerate bounds")
        self.obstacles = list(obstacles)
        self.doors: dict[str, Door] = {d.id: d for d in doors}
        if len(self.doors) != len(doors):
            raise EnvironmentFormatError("duplicate door ids")
        ids = [lm.id for lm in landmarks]
        if len(set(ids)) != len(ids):
            raise EnvironmentFormatError("duplicate landmark ids")
        self.landmarks = list(landmarks)
        self.robot = robot
        self.regions = dict(regions or {})
        self.transients: dict[str, Transient] = {}
        self.checks = 0  # collision-check counter, strictly non-decreasing

    # -- geometry ------------------------------------------------------

    def active_polygons(self) -> list[Polygon]:
        polys = list(self.obstacles)
        polys.extend(d.polygon for d in self.doors.values() if d.state == CLOSED)
        polys.extend(t.polygon for t in self.transients.values())
        return polys

    def static_polygons(self) -> list[Polygon]:
        return list(self.obstacles)

    def collides(self, state: np.ndarray) -> bool:
        return _disc_collides(self, state, self.active_polygons())

    def collides_static(self, state: np.ndarray) -> bool:
        return _disc_collides(self, state, self.obstacles)

    def fov_true(self, x: np.ndarray, lm: Landmark) -> bool:
        return _visible(self, x, lm, self.active_polygons())

    def fov_static(self, x: np.ndarray, lm: Landmark) -> bool:
        """Visibility against static geometry only (used at build time)."""
        return _visible(self, x, lm, self.obstacles)

    # -- lifecycle -----------------------------------------------------

    def clone(self) -> "WorldModel":
        w = WorldModel(self.bounds, self.obstacles,
                       [Door(d.id, d.polygon, d.state, d.default_state) for d in self.doors.values()],
                       self.landmarks, self.robot, self.regions)
        w.transients = {t.id: Transient(t.id, t.polygon) for t in self.transients.values()}
        return w


def _disc_collides(owner, state: np.ndarray, polys: Sequence[Polygon]) -> bool:
    owner.checks += 1
    x, y = float(state[0]), float(state[1])
    r = owner.robot.radius if isinstance(owner, WorldModel) else owner.world.robot.radius
    xmin, ymin, xmax, ymax = owner.bounds if isinstance(owner, WorldModel) else owner.world.bounds
    if x - r < xmin or x + r > xmax or y - r < ymin or y + r > ymax:
        return True
    return any(poly.disc_hits(x, y, r) for poly in polys)


def _visible(owner, x: np.ndarray, lm: Landmark, polys: Sequence[Polygon]) -> bool:
    spec = owner.robot if isinstance(owner, WorldModel) else owner.world.robot
    if not in_fov(x, lm, spec.fov_half_angle):
        return False
    p = np.asarray(x[:2], dtype=float)
    q = lm.xy
    # Pull the endpoint slightly off the wall so a landmark's own wall
    # polygon does not occlude it.
    q_in = q + (p - q) * 1e-6
    return not any(poly.segment_intersects(p, q_in) for poly in polys)


class _OcclusionIndex:
    """All edges of a polygon list flattened into single arrays, so one
    broadcast ray-vs-segment test replaces a per-polygon Python loop."""

    __slots__ = ("polys", "_a", "_ab", "_offsets")

    def __init__(self, polys: Sequence[Polygon]):
        self.polys = list(polys)
        self._a = np.concatenate([p._a for p in polys], axis=0)
        self._ab = np.concatenate([p._ab for p in polys], axis=0)
        counts = np.array([p._a.shape[0] for p in polys])
        self._offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))

    def blocked(self, p: np.ndarray, ends: np.ndarray) -> np.ndarray:
        a, ab, offs = self._a, self._ab, self._offsets
        dp = p[None, :] - a
        cross_p = ab[:, 0] * dp[:, 1] - ab[:, 1] * dp[:, 0]
        if np.logical_and.reduceat(cross_p >= -1e-12, offs).any():
            return np.ones(ends.shape[0], dtype=bool)
        d = ends[:, None, :] - a[None, :, :]
        cross_q = ab[None, :, 0] * d[:, :, 1] - ab[None, :, 1] * d[:, :, 0]
        q_inside = np.logical_and.reduceat(cross_q >= -1e-12, offs,
                                           axis=1).any(axis=1)
        r = ends - p[None, :]
        qp = a - p[None, :]
        denom = r[:, 0, None] * ab[None, :, 1] - r[:, 1, None] * ab[None, :, 0]
        num_t = qp[:, 0] * ab[:, 1] - qp[:, 1] * ab[:, 0]
        num_u = qp[None, :, 0] * r[:, 1, None] - qp[None, :, 1] * r[:, 0, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num_t[None, :] / denom
            u = num_u / denom
        hit = (np.abs(denom) > 1e-15) & (t >= 0.0) & (t <= 1.0) \
            & (u >= 0.0) & (u <= 1.0)
        return q_inside | hit.any(axis=1)


_OCCLUSION_CACHE: dict[tuple, _OcclusionIndex] = {}


def _occlusion_index(polys: Sequence[Polygon]) -> _OcclusionIndex:
    key = tuple(id(p) for p in polys)
    idx = _OCCLUSION_CACHE.get(key)
    if idx is None:
        if len(_OCCLUSION_CACHE) > 64:
            _OCCLUSION_CACHE.clear()
        idx = _OCCLUSION_CACHE[key] = _OcclusionIndex(polys)
    return idx


def visible_mask(x: np.ndarray, xy: np.ndarray,
                 polys: Sequence[Polygon], half_angle: float) -> np.ndarray:
    """Vectorized sensing-cone + line-of-sight mask over landmark arrays."""
    mask = fov_mask(x, xy, half_angle)
    if not np.any(mask) or not polys:
        return mask
    idx = np.flatnonzero(mask)
    p = np.asarray(x[:2], dtype=float)
    ends = xy[idx] + (p[None, :] - xy[idx]) * 1e-6
    blocked = _occlusion_index(polys).blocked(p, ends)
    mask[idx[blocked]] = False
    return mask


def collides(state: np.ndarray, geom) -> bool:
    """Disc-vs-map collision through either a WorldModel or a BeliefMap."""
    return geom.collides(state)


@dataclass
class SimEnv:
    """What a closed-loop simulation needs: map handle, sensing, kinematics."""

    geom: object                 # has .collides(state)
    landmarks: Sequence[Landmark]
    fov: object                  # callable (x, landmark) -> bool
    model: MotionModel
    obs_params: ObsNoiseParams
    dt: float
    polys: object = None         # callable () -> list[Polygon] for occlusion
    half_angle: float = float(np.pi / 2.0)
    lm_ids: np.ndarray = None
    lm_xy: np.ndarray = None
    lm_normals: np.ndarray = None

    def __post_init__(self):
        if self.lm_ids is None:
            self.lm_ids, self.lm_xy, self.lm_normals = landmark_arrays(self.landmarks)
        if self.polys is None:
            self.polys = lambda: []

    def measure(self, x: np.ndarray) -> MeasurementBatch:
        """Noiseless range-bearing batch over currently visible landmarks."""
        mask = visible_mask(x, self.lm_xy, self.polys(), self.half_angle)
        if not np.any(mask):
            return MeasurementBatch.empty()
        xy = self.lm_xy[mask]
        return MeasurementBatch(self.lm_ids[mask], xy, self.lm_normals[mask],
                                rb_batch(x, xy))


def sim_env_static(world: WorldModel) -> SimEnv:
    """Build-time view: static obstacles only, doors treated as open."""
    geom = _StaticView(world)
    return SimEnv(geom, world.landmarks, world.fov_static, world.robot.make_model(),
                  world.robot.obs_noise, world.robot.dt,
                  polys=world.static_polygons, half_angle=world.robot.fov_half_angle)


def sim_env_true(world: WorldModel) -> SimEnv:
    return SimEnv(world, world.landmarks, world.fov_true, world.robot.make_model(),
                  world.robot.obs_noise, world.robot.dt,
                  polys=world.active_polygons, half_angle=world.robot.fov_half_angle)


class _StaticView:
    """Collision handle over static geometry; counts against the world."""

    def __init__(self, world: WorldModel):
        self.world = world

    def collides(self, state: np.ndarray) -> bool:
        return self.world.collides_static(state)


# --- planner-side map -------------------------------------------------------


@dataclass(frozen=True)
class MapChange:
    kind: str          # "door" | "transient_add" | "transient_remove"
    id: str
    state: str | None = None
    polygon_vertices: tuple | None = None


class BeliefMap:
    """The planner's copy of the map: believed door states and transients."""

    def __init__(self, world: WorldModel, forgetting_s: float = 600.0):
        self.world = world
        self.forgetting_s = float(forgetting_s)
        self.door_states: dict[str, str] = {d.id: d.default_state for d in world.doors.values()}
        self.door_since: dict[str, int] = {}
        self.transients: dict[str, Transient] = {}
        self.transient_since: dict[str, int] = {}
        self.checks = 0

    @property
    def bounds(self):
        return self.world.bounds

    @property
    def landmarks(self):
        return self.world.landmarks

    def active_polygons(self) -> list[Polygon]:
        polys = list(self.world.obstacles)
        polys.extend(d.polygon for d in self.world.doors.values()
                     if self.door_states[d.id] == CLOSED)
        polys.extend(t.polygon for t in self.transients.values())
        return polys

    def collides(self, state: np.ndarray) -> bool:
        return _disc_collides(self, state, self.active_polygons())

    def fov_believed(self, x: np.ndarray, lm: Landmark) -> bool:
        return _visible(self, x, lm, self.active_polygons())

    def apply_change(self, change: MapChange, tick: int) -> None:
        if change.kind == "door":
            self.door_states[change.id] = change.state
            self.door_since[change.id] = tick
        elif change.kind == "transient_add":
            self.transients[change.id] = Transient(change.id, Polygon(change.polygon_vertices))
            self.transient_since[change.id] = tick
        elif change.kind == "transient_remove":
            self.transients.pop(change.id, None)
            self.transient_since.pop(change.id, None)
        else:
            raise ValueError(f"unknown map change kind {change.kind!r}")


def sim_env_believed(bmap: BeliefMap) -> SimEnv:
    """Planner-side view: believed doors and transients, believed occlusion."""
    w = bmap.world
    return SimEnv(bmap, w.landmarks, bmap.fov_believed, w.robot.make_model(),
                  w.robot.obs_noise, w.robot.dt,
                  polys=bmap.active_polygons, half_angle=w.robot.fov_half_angle)


def sense_environment(x: np.ndarray, world: WorldModel, bmap: BeliefMap,
                      tick: int) -> list[MapChange]:
    """Report discrepancies between world and belief map near the robot.

    Doors and transients within the sensing range report their true state;
    anything farther keeps its believed state.
    """
    p = np.asarray(x[:2], dtype=float)
    rng = world.robot.sense_range
    changes: list[MapChange] = []
    for d in world.doors.values():
        if d.polygon.distance(p) <= rng and bmap.door_states[d.id] != d.state:
            changes.append(MapChange("door", d.id, state=d.state))
    for t in world.transients.values():
        if t.polygon.distance(p) <= rng and t.id not in bmap.transients:
            changes.append(MapChange("transient_add", t.id,
                                     polygon_vertices=tuple(map(tuple, t.polygon.vertices))))
    for t in list(bmap.transients.values()):
        if t.polygon.distance(p) <= rng and t.id not in world.transients:
            changes.append(MapChange("transient_remove", t.id))
    return changes


def apply_forgetting(bmap: BeliefMap, tick: int, dt: float) -> list[MapChange]:
    """Age out believed map deviations older than the forgetting window.

    Doors revert to their default state; transients are dropped.  Returns
    the reverted entries (idempotent: a second call at the same tick
    returns nothing).
    """
    reverted: list[MapChange] = []
    horizon = bmap.forgetting_s
    for door_id, since in list(bmap.door_since.items()):
        if (tick - since) * dt > horizon:
            default = bmap.world.doors[door_id].default_state
            if bmap.door_states[door_id] != default:
                bmap.door_states[door_id] = default
                reverted.append(MapChange("door", door_id, state=default))
            del bmap.door_since[door_id]
    for t_id, since in list(bmap.transient_since.items()):
        if (tick - since) * dt > horizon:
            bmap.transients.pop(t_id, None)
            del bmap.transient_since[t_id]
            reverted.append(MapChange("transient_remove", t_id))
    return reverted


# --- environment file I/O ---------------------------------------------------


def environment_doc(world: WorldModel) -> dict:
    return {
        "schema": ENV_SCHEMA,
        "bounds": list(world.bounds),
        "obstacles": [{"vertices": world_poly_vertices(p)} for p in world.obstacles],
        "doors": [{"id": d.id, "vertices": world_poly_vertices(d.polygon),
                   "state": d.state, "default_state": d.default_state}
                  for d in world.doors.values()],
        "landmarks": [{"id": lm.id, "x": lm.x, "y": lm.y,
                       "wall_normal_deg": float(np.degrees(lm.wall_normal))}
                      for lm in world.landmarks],
        "robot": {
            "kind": world.robot.kind,
            "v_max": world.robot.v_max,
            "omega_max": world.robot.omega_max,
            "dt": world.robot.dt,
            "radius": world.robot.radius,
            "fov_half_angle_deg": float(np.degrees(world.robot.fov_half_angle)),
            "sense_range": world.robot.sense_range,
            "motion_noise": vars(world.robot.motion_noise),
            "obs_noise": vars(world.robot.obs_noise),
        },
        "regions": {k: list(v) for k, v in world.regions.items()},
    }


def save_environment(world: WorldModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(environment_doc(world), indent=2, sort_keys=True))


def world_poly_vertices(p: Polygon) -> list[list[float]]:
    return [[float(a), float(b)] for a, b in p.vertices]


def environment_from_doc(doc: dict) -> WorldModel:
    if doc.get("schema") != ENV_SCHEMA:
        raise EnvironmentFormatError(f"unsupported schema {doc.get('schema')!r}")
    try:
        obstacles = [Polygon(o["vertices"]) for o in doc.get("obstacles", [])]
        doors = [Door(d["id"], Polygon(d["vertices"]), d.get("state", OPEN),
                      d.get("default_state", OPEN)) for d in doc.get("doors", [])]
        landmarks = [Landmark(int(lm["id"]), float(lm["x"]), float(lm["y"]),
                              wrap_angle(np.radians(float(lm.get("wall_normal_deg", 0.0)))))
                     for lm in doc.get("landmarks", [])]
        robot = RobotSpec()
        if "robot" in doc:
            r = doc["robot"]
            robot = RobotSpec(
                kind=r.get("kind", "unicycle"),
                v_max=float(r.get("v_max", 0.3)),
                omega_max=float(r.get("omega_max", 1.0)),
                dt=float(r.get("dt", 0.1)),
                radius=float(r.get("radius", 1.0)),
                fov_half_angle=float(np.radians(r.get("fov_half_angle_deg", 90.0))),
                sense_range=float(r.get("sense_range", 2.0)),
                motion_noise=MotionNoiseParams(**r.get("motion_noise", {})),
                obs_noise=ObsNoiseParams(**r.get("obs_noise", {})),
            )
        regions = {k: tuple(float(x) for x in v) for k, v in doc.get("regions", {}).items()}
        return WorldModel(doc["bounds"], obstacles, doors, landmarks, robot, regions)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, EnvironmentFormatError):
            raise
        raise EnvironmentFormatError(f"malformed environment file: {exc}") from exc


def load_environment(path: str | Path) -> WorldModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise EnvironmentFormatError(f"not valid JSON: {exc}") from exc
    return environment_from_doc(doc)
