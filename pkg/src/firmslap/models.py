"""Motion and observation models.

Two planar robots: a unicycle (forward speed + turn rate) and an
omnidirectional base (planar velocity + turn rate).  Noise enters the
kinematics scaled by sqrt(dt) so covariance growth is integration-step
invariant.  Observations are range-bearing readings of point landmarks
mounted on walls; measurement noise grows with distance and with the
incidence angle of the viewing ray against the landmark's wall normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .beliefs import STATE_DIM, wrap_angle


@dataclass(frozen=True)
class MotionNoiseParams:
    """Control-proportional actuation noise plus floor terms."""

    eta: float = 0.03
    sigma_b_v: float = 0.01
    sigma_b_omega: float = 0.001


@dataclass(frozen=True)
class ObsNoiseParams:
    """Range/bearing noise growing with distance and incidence angle."""

    eta_r_d: float = 0.1
    eta_r_phi: float = 0.01
    sigma_b_r: float = 0.05
    eta_th_d: float = 0.001
    eta_th_phi: float = 0.01
    sigma_b_th: float = float(np.radians(2.0))


@dataclass(frozen=True)
class Landmark:
    id: int
    x: float
    y: float
    # Outward normal of the wall the landmark sits on, radians.
    wall_normal: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class UnicycleModel:
    """Forward-speed / turn-rate kinematics; noise along heading."""

    v_max: float = 0.3
    omega_max: float = 1.0
    noise: MotionNoiseParams = field(default_factory=MotionNoiseParams)
    nu: int = 2
    nw: int = 2
    kind: str = "unicycle"

    def propagate(self, x: np.ndarray, u: np.ndarray, w: np.ndarray, dt: float) -> np.ndarray:
        sdt = np.sqrt(dt)
        ds = u[0] * dt + w[0] * sdt
        th = x[2]
        out = np.array([
            x[0] + ds * np.cos(th),
            x[1] + ds * np.sin(th),
            wrap_angle(th + u[1] * dt + w[1] * sdt),
        ])
        return out

    def jacobians(self, x: np.ndarray, u: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(A, B, G) = df/dx, df/du, df/dw at w = 0."""
        th = x[2]
        c, s = np.cos(th), np.sin(th)
        sdt = np.sqrt(dt)
        A = np.array([[1.0, 0.0, -u[0] * dt * s],
                      [0.0, 1.0, u[0] * dt * c],
                      [0.0, 0.0, 1.0]])
        B = np.array([[dt * c, 0.0],
                      [dt * s, 0.0],
                      [0.0, dt]])
        G = np.array([[sdt * c, 0.0],
                      [sdt * s, 0.0],
                      [0.0, sdt]])
        return A, B, G

    def process_noise_std(self, u: np.ndarray) -> np.ndarray:
        p = self.noise
        return np.array([p.eta * abs(float(u[0])) + p.sigma_b_v,
                         p.eta * abs(float(u[1])) + p.sigma_b_omega])

    def process_noise_cov(self, u: np.ndarray) -> np.ndarray:
        s = self.process_noise_std(u)
        return np.diag(s * s)

    def clamp(self, u: np.ndarray) -> np.ndarray:
        return np.array([
            min(max(float(u[0]), -self.v_max), self.v_max),
            min(max(float(u[1]), -self.omega_max), self.omega_max),
        ])

    def zero_control(self) -> np.ndarray:
        return np.zeros(2)


@dataclass(frozen=True)
class OmniModel:
    """Independently controlled planar velocity and turn rate."""

    v_max: float = 0.3
    omega_max: float = 1.0
    noise: MotionNoiseParams = field(default_factory=MotionNoiseParams)
    nu: int = 3
    nw: int = 3
    kind: str = "omni"

    def propagate(self, x: np.ndarray, u: np.ndarray, w: np.ndarray, dt: float) -> np.ndarray:
        out = x + u * dt + w * np.sqrt(dt)
        out[2] = wrap_angle(out[2])
        return out

    def jacobians(self, x: np.ndarray, u: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _omni_jacobians(float(dt))

    def process_noise_std(self, u: np.ndarray) -> np.ndarray:
        # Same proportional law as the unicycle, applied per velocity component.
        p = self.noise
        return np.array([p.eta * abs(float(u[0])) + p.sigma_b_v,
                         p.eta * abs(float(u[1])) + p.sigma_b_v,
                         p.eta * abs(float(u[2])) + p.sigma_b_omega])

    def process_noise_cov(self, u: np.ndarray) -> np.ndarray:
        s = self.process_noise_std(u)
        return np.diag(s * s)

    def clamp(self, u: np.ndarray) -> np.ndarray:
        ux, uy, uw = float(u[0]), float(u[1]), float(u[2])
        v = np.hypot(ux, uy)
        scale = self.v_max / v if v > self.v_max else 1.0
        return np.array([ux * scale, uy * scale,
                         min(max(uw, -self.omega_max), self.omega_max)])

    def zero_control(self) -> np.ndarray:
        return np.zeros(3)


@lru_cache(maxsize=8)
def _omni_jacobians(dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    A = np.eye(3)
    B = dt * np.eye(3)
    G = np.sqrt(dt) * np.eye(3)
    for m in (A, B, G):
        m.setflags(write=False)
    return A, B, G


MotionModel = UnicycleModel | OmniModel


def make_model(kind: str, v_max: float, omega_max: float, noise: MotionNoiseParams) -> MotionModel:
    if kind == "unicycle":
        return UnicycleModel(v_max=v_max, omega_max=omega_max, noise=noise)
    if kind == "omni":
        return OmniModel(v_max=v_max, omega_max=omega_max, noise=noise)
    raise ValueError(f"unknown model kind {kind!r}")


# --- observation model -----------------------------------------------------


def range_bearing(x: np.ndarray, lm: Landmark) -> np.ndarray:
    """Noiseless (range, bearing) of a landmark from pose x; d = L - p."""
    dx = lm.x - x[0]
    dy = lm.y - x[1]
    r = np.hypot(dx, dy)
    return np.array([r, wrap_angle(np.arctan2(dy, dx) - x[2])])


def incidence_angle(x: np.ndarray, lm: Landmark) -> float:
    """Angle between the landmark-to-robot ray and the wall normal.

    Clamped to [-pi/2, pi/2]: grazing views saturate rather than wrap.
    """
    ray = np.arctan2(x[1] - lm.y, x[0] - lm.x)
    phi = wrap_angle(ray - lm.wall_normal)
    return float(np.clip(phi, -np.pi / 2.0, np.pi / 2.0))


def obs_noise_cov(x: np.ndarray, lm: Landmark, params: ObsNoiseParams) -> np.ndarray:
    d = float(np.hypot(lm.x - x[0], lm.y - x[1]))
    phi = abs(incidence_angle(x, lm))
    sr = params.eta_r_d * d + params.eta_r_phi * phi + params.sigma_b_r
    sth = params.eta_th_d * d + params.eta_th_phi * phi + params.sigma_b_th
    return np.diag([sr * sr, sth * sth])


def obs_jacobian(x: np.ndarray, lm: Landmark) -> np.ndarray:
    """dh/dx for one landmark's (range, bearing) rows; 2x3."""
    dx = lm.x - x[0]
    dy = lm.y - x[1]
    r2 = dx * dx + dy * dy
    r = np.sqrt(r2)
    return np.array([[-dx / r, -dy / r, 0.0],
                     [dy / r2, -dx / r2, -1.0]])


def in_fov(x: np.ndarray, lm: Landmark, half_angle: float) -> bool:
    """Heading-relative bearing within +/- half_angle (inclusive)."""
    b = wrap_angle(np.arctan2(lm.y - x[1], lm.x - x[0]) - x[2])
    return abs(b) <= half_angle + 1e-12


# Vectorized equivalents over landmark coordinate arrays; these carry the
# simulation hot loops, the per-landmark functions above stay as the
# reference forms.


def landmark_arrays(landmarks: Sequence[Landmark]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, xy, wall_normals) arrays in the given order."""
    ids = np.array([lm.id for lm in landmarks], dtype=int)
    xy = np.array([[lm.x, lm.y] for lm in landmarks], dtype=float).reshape(-1, 2)
    normals = np.array([lm.wall_normal for lm in landmarks], dtype=float)
    return ids, xy, normals


def rb_batch(x: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """(m, 2) noiseless (range, bearing) rows; d = L - p."""
    from .beliefs import wrap_angles
    d = xy - x[None, :2]
    out = np.empty((xy.shape[0], 2))
    out[:, 0] = np.hypot(d[:, 0], d[:, 1])
    out[:, 1] = wrap_angles(np.arctan2(d[:, 1], d[:, 0]) - x[2])
    return out


def noise_std_batch(x: np.ndarray, xy: np.ndarray, normals: np.ndarray,
                    params: ObsNoiseParams) -> np.ndarray:
    """(m, 2) noise standard deviations (range, bearing) at pose x."""
    from .beliefs import wrap_angles
    d = x[None, :2] - xy
    dist = np.hypot(d[:, 0], d[:, 1])
    ray = np.arctan2(d[:, 1], d[:, 0])
    phi = np.abs(np.clip(wrap_angles(ray - normals), -np.pi / 2.0, np.pi / 2.0))
    out = np.empty((xy.shape[0], 2))
    out[:, 0] = params.eta_r_d * dist + params.eta_r_phi * phi + params.sigma_b_r
    out[:, 1] = params.eta_th_d * dist + params.eta_th_phi * phi + params.sigma_b_th
    return out


def jac_batch(x: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """(2m, 3) stacked observation Jacobian rows at pose x."""
    d = xy - x[None, :2]
    r2 = d[:, 0] ** 2 + d[:, 1] ** 2
    r = np.sqrt(r2)
    m = xy.shape[0]
    H = np.zeros((2 * m, 3))
    H[0::2, 0] = -d[:, 0] / r
    H[0::2, 1] = -d[:, 1] / r
    H[1::2, 0] = d[:, 1] / r2
    H[1::2, 1] = -d[:, 0] / r2
    H[1::2, 2] = -1.0
    return H


def fov_mask(x: np.ndarray, xy: np.ndarray, half_angle: float) -> np.ndarray:
    """Cone visibility mask (no occlusion); excludes coincident landmarks."""
    from .beliefs import wrap_angles
    d = xy - x[None, :2]
    dist = np.hypot(d[:, 0], d[:, 1])
    b = np.abs(wrap_angles(np.arctan2(d[:, 1], d[:, 0]) - x[2]))
    return (dist >= 1e-9) & (b <= half_angle + 1e-12)


class MeasurementBatch:
    """Realized readings of a set of landmarks, as flat arrays.

    ids/xy/normals identify the measured landmarks; z holds (range,
    bearing) rows.  Empty batches are allowed.
    """

    __slots__ = ("ids", "xy", "normals", "z")

    def __init__(self, ids: np.ndarray, xy: np.ndarray, normals: np.ndarray, z: np.ndarray):
        self.ids = ids
        self.xy = xy
        self.normals = normals
        self.z = z

    def __len__(self) -> int:
        return len(self.ids)

    @staticmethod
    def empty() -> "MeasurementBatch":
        return MeasurementBatch(np.zeros(0, dtype=int), np.zeros((0, 2)),
                                np.zeros(0), np.zeros((0, 2)))


@dataclass(frozen=True)
class Observation:
    landmark: Landmark
    z: np.ndarray          # noiseless (range, bearing)
    cov: np.ndarray        # 2x2 noise covariance at the true pose


def observe(x: np.ndarray, landmarks: Sequence[Landmark],
            fov: Callable[[np.ndarray, Landmark], bool],
            params: ObsNoiseParams) -> list[Observation]:
    """Noiseless readings plus per-landmark noise covariance for visible landmarks.

    Visibility is delegated to the fov predicate so occlusion logic stays
    with the map.  Landmarks closer than 1e-9 are skipped (bearing undefined).
    """
    out = []
    for lm in landmarks:
        if np.hypot(lm.x - x[0], lm.y - x[1]) < 1e-9:
            continue
        if fov(x, lm):
            out.append(Observation(lm, range_bearing(x, lm), obs_noise_cov(x, lm, params)))
    return out
