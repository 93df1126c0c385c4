"""Filtering: EKF, fixed-point Riccati solve, stationary node filters.

The roadmap hinges on node beliefs being reachable fixed points of the
filter dynamics: at each node the motion/observation models are linearized
and the prediction-covariance Riccati map is iterated to its fixed point.
A node whose local system is undetectable (covariance grows without bound
along some direction) is rejected with UnobservableNodeError.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .beliefs import GaussianBelief, wrap_angle, wrap_angles
from .models import (Landmark, MeasurementBatch, MotionModel, Observation,
                     ObsNoiseParams, jac_batch, noise_std_batch,
                     obs_jacobian, obs_noise_cov, range_bearing, rb_batch)


class UnobservableNodeError(RuntimeError):
    """Riccati iteration failed to converge; local system undetectable."""


class DegenerateNoiseError(RuntimeError):
    """Innovation covariance numerically singular."""


@dataclass(frozen=True)
class LinearizedSystem:
    """Frozen local LTI system: x' = Ax + Bu + Gw, z = Hx + Mv."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    M: np.ndarray
    R: np.ndarray


def riccati_map(P: np.ndarray, A: np.ndarray, GQGT: np.ndarray,
                H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """One application of the prediction-covariance Riccati map."""
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    P_upd = P - K @ H @ P
    out = A @ P_upd @ A.T + GQGT
    return 0.5 * (out + out.T)


def dare_solve(A: np.ndarray, G: np.ndarray, Q: np.ndarray,
               H: np.ndarray, R: np.ndarray,
               tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Fixed point of the prediction-covariance Riccati map.

    Plain fixed-point iteration from the identity; detectable systems
    contract to the unique stabilizing solution.  Raises
    UnobservableNodeError if successive iterates fail to settle within
    max_iter or the fixed-point residual stays above 1e-8.
    """
    n = A.shape[0]
    GQGT = G @ Q @ G.T
    P = np.eye(n)
    for _ in range(max_iter):
        P_next = riccati_map(P, A, GQGT, H, R)
        delta = np.linalg.norm(P_next - P, ord="fro")
        P = P_next
        if delta < tol:
            break
    else:
        raise UnobservableNodeError(f"Riccati iteration did not converge (last delta {delta:.3e})")
    residual = np.linalg.norm(riccati_map(P, A, GQGT, H, R) - P, ord="fro")
    if not np.isfinite(residual) or residual > 1e-8:
        raise UnobservableNodeError(f"Riccati fixed-point residual {residual:.3e} exceeds 1e-8")
    return P


def posterior_cov(P_minus: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Measurement-updated covariance from a prediction covariance."""
    S = H @ P_minus @ H.T + R
    K = np.linalg.solve(S, H @ P_minus).T
    P = P_minus - K @ H @ P_minus
    return 0.5 * (P + P.T)


# --- extended Kalman filter -------------------------------------------------


_I3 = np.eye(3)
_I3.setflags(write=False)
_ZW = {1: np.zeros(1), 2: np.zeros(2), 3: np.zeros(3)}
for _z in _ZW.values():
    _z.setflags(write=False)


def kalman_update(mean: np.ndarray, cov: np.ndarray, H: np.ndarray, R: np.ndarray,
                  innovation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Generic linear measurement update (Joseph-form covariance)."""
    S = H @ cov @ H.T + R
    try:
        K = np.linalg.solve(S, H @ cov).T
    except np.linalg.LinAlgError as exc:
        raise DegenerateNoiseError("innovation covariance singular") from exc
    mean_new = mean + K @ innovation
    ident = _I3 if cov.shape[0] == 3 else np.eye(cov.shape[0])
    IKH = ident - K @ H
    cov_new = IKH @ cov @ IKH.T + K @ R @ K.T
    return mean_new, 0.5 * (cov_new + cov_new.T)


@dataclass(frozen=True)
class Measurement:
    """A realized (noisy) reading of one landmark."""

    landmark: Landmark
    z: np.ndarray  # (range, bearing)


@dataclass(frozen=True)
class InnovationRecord:
    landmark_id: int
    d_range: float
    d_bearing: float


def _predict_raw(mean: np.ndarray, cov: np.ndarray, model: MotionModel,
                 u: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    A, _, G = model.jacobians(mean, u, dt)
    Q = model.process_noise_cov(u)
    mean_n = model.propagate(mean, u, _ZW[model.nw], dt)
    cov_n = A @ cov @ A.T + G @ Q @ G.T
    return mean_n, 0.5 * (cov_n + cov_n.T)


def _update_batch_raw(mean: np.ndarray, cov: np.ndarray, batch: MeasurementBatch,
                      params: ObsNoiseParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """EKF measurement update from a batch; returns (mean, cov, innovations).

    Jacobians and noise are evaluated at the current mean; bearing
    innovations are wrapped.  innovations has shape (m, 2).
    """
    z_pred = rb_batch(mean, batch.xy)
    innov = batch.z - z_pred
    innov[:, 1] = wrap_angles(innov[:, 1])
    H = jac_batch(mean, batch.xy)
    std = noise_std_batch(mean, batch.xy, batch.normals, params)
    R = np.diag((std * std).reshape(-1))
    mean_n, cov_n = kalman_update(mean, cov, H, R, innov.reshape(-1))
    mean_n[2] = wrap_angle(mean_n[2])
    return mean_n, cov_n, innov


def ekf_predict(belief: GaussianBelief, model: MotionModel, u: np.ndarray,
                dt: float) -> GaussianBelief:
    mean, cov = _predict_raw(belief.mean, belief.cov, model, u, dt)
    return GaussianBelief(mean, cov, belief.tick)


def _measurements_to_batch(measurements: Sequence[Measurement]) -> MeasurementBatch:
    ids = np.array([m.landmark.id for m in measurements], dtype=int)
    xy = np.array([[m.landmark.x, m.landmark.y] for m in measurements]).reshape(-1, 2)
    normals = np.array([m.landmark.wall_normal for m in measurements], dtype=float)
    z = np.array([m.z for m in measurements], dtype=float).reshape(-1, 2)
    return MeasurementBatch(ids, xy, normals, z)


def _records(ids: np.ndarray, innov: np.ndarray) -> list[InnovationRecord]:
    return [InnovationRecord(int(i), float(dr), float(db))
            for i, (dr, db) in zip(ids, innov)]


def ekf_update(belief: GaussianBelief, measurements: Sequence[Measurement],
               params: ObsNoiseParams) -> tuple[GaussianBelief, list[InnovationRecord]]:
    """Joint update over all measured landmarks; bearing innovations wrapped.

    With no measurements the belief passes through unchanged.
    """
    if not measurements:
        return belief, []
    batch = _measurements_to_batch(measurements)
    mean, cov, innov = _update_batch_raw(belief.mean, belief.cov, batch, params)
    return GaussianBelief(mean, cov, belief.tick), _records(batch.ids, innov)


def ekf_step(belief: GaussianBelief, model: MotionModel, u: np.ndarray, dt: float,
             batch: MeasurementBatch, params: ObsNoiseParams
             ) -> tuple[GaussianBelief, np.ndarray]:
    """Fused predict + update; returns the new belief and (m, 2) innovations."""
    mean, cov = _predict_raw(belief.mean, belief.cov, model, u, dt)
    if len(batch):
        mean, cov, innov = _update_batch_raw(mean, cov, batch, params)
    else:
        innov = np.zeros((0, 2))
    return GaussianBelief.trusted(mean, cov, belief.tick), innov


# --- stationary node filter -------------------------------------------------


@dataclass(frozen=True)
class NodeFilter:
    """Filter matrices frozen at a node point, plus stationary covariances."""

    point: np.ndarray
    system: LinearizedSystem
    landmarks: tuple[Landmark, ...]
    P_minus: np.ndarray
    P_plus: np.ndarray

    @property
    def landmark_ids(self) -> frozenset[int]:
        return frozenset(lm.id for lm in self.landmarks)

    @cached_property
    def landmark_offsets(self) -> dict[int, int]:
        """Landmark id -> index of its row pair in the frozen H/R stack."""
        return {lm.id: i for i, lm in enumerate(self.landmarks)}


def stationary_kf(point: np.ndarray, model: MotionModel,
                  visible: Sequence[Observation], params: ObsNoiseParams,
                  dt: float) -> NodeFilter:
    """Build the frozen filter at a node point from its visible landmarks.

    Raises UnobservableNodeError when no landmark is visible or the frozen
    Riccati iteration fails to converge.
    """
    if not visible:
        raise UnobservableNodeError("no visible landmark at node point")
    point = np.asarray(point, dtype=float).reshape(3)
    u0 = model.zero_control()
    A, B, G = model.jacobians(point, u0, dt)
    Q = model.process_noise_cov(u0)
    lms = tuple(obs.landmark for obs in visible)
    H = np.vstack([obs_jacobian(point, lm) for lm in lms])
    R_blocks = [obs_noise_cov(point, lm, params) for lm in lms]
    R = np.zeros((2 * len(lms), 2 * len(lms)))
    for i, blk in enumerate(R_blocks):
        R[2 * i:2 * i + 2, 2 * i:2 * i + 2] = blk
    P_minus = dare_solve(A, G, Q, H, R)
    P_plus = posterior_cov(P_minus, H, R)
    sys = LinearizedSystem(A=A, B=B, G=G, Q=Q, H=H, M=np.eye(H.shape[0]), R=R)
    return NodeFilter(point=point, system=sys, landmarks=lms,
                      P_minus=P_minus, P_plus=P_plus)


def _skf_predict_raw(mean: np.ndarray, cov: np.ndarray, nf: NodeFilter,
                     model: MotionModel, u: np.ndarray, dt: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    s = nf.system
    mean_n = model.propagate(mean, u, _ZW[model.nw], dt)
    cov_n = s.A @ cov @ s.A.T + s.G @ s.Q @ s.G.T
    return mean_n, 0.5 * (cov_n + cov_n.T)


def _skf_update_raw(mean: np.ndarray, cov: np.ndarray, nf: NodeFilter,
                    batch: MeasurementBatch
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Update against the node's frozen rows for the measured subset.

    Returns (mean, cov, used_ids, innovations).  With all frozen landmarks
    measured every tick, the covariance converges to the node's stationary
    posterior exactly.
    """
    offsets = nf.landmark_offsets
    keep = np.array([i for i, lid in enumerate(batch.ids) if int(lid) in offsets], dtype=int)
    if keep.size == 0:
        return mean, cov, np.zeros(0, dtype=int), np.zeros((0, 2))
    ids = batch.ids[keep]
    xy = batch.xy[keep]
    z = batch.z[keep]
    rows = np.array([(2 * offsets[int(lid)], 2 * offsets[int(lid)] + 1)
                     for lid in ids], dtype=int).reshape(-1)
    s = nf.system
    H = s.H[rows]
    R = s.R[np.ix_(rows, rows)]
    z_pred = rb_batch(mean, xy)
    innov = z - z_pred
    innov[:, 1] = wrap_angles(innov[:, 1])
    mean_n, cov_n = kalman_update(mean, cov, H, R, innov.reshape(-1))
    mean_n[2] = wrap_angle(mean_n[2])
    return mean_n, cov_n, ids, innov


def skf_predict(belief: GaussianBelief, nf: NodeFilter, model: MotionModel,
                u: np.ndarray, dt: float) -> GaussianBelief:
    """Prediction with nonlinear mean and frozen covariance recursion."""
    mean, cov = _skf_predict_raw(belief.mean, belief.cov, nf, model, u, dt)
    return GaussianBelief(mean, cov, belief.tick)


def skf_update(belief: GaussianBelief, nf: NodeFilter,
               measurements: Sequence[Measurement],
               params: ObsNoiseParams) -> tuple[GaussianBelief, list[InnovationRecord]]:
    """Update against the node's frozen landmark rows (measured subset only)."""
    if not measurements:
        return belief, []
    batch = _measurements_to_batch(measurements)
    mean, cov, ids, innov = _skf_update_raw(belief.mean, belief.cov, nf, batch)
    return GaussianBelief(mean, cov, belief.tick), _records(ids, innov)


def skf_step(belief: GaussianBelief, nf: NodeFilter, model: MotionModel,
             u: np.ndarray, dt: float, batch: MeasurementBatch
             ) -> tuple[GaussianBelief, np.ndarray, np.ndarray]:
    """Fused frozen-filter predict + update.

    Returns (belief, used_ids, innovations); innovations cover only the
    frozen landmark subset actually measured.
    """
    mean, cov = _skf_predict_raw(belief.mean, belief.cov, nf, model, u, dt)
    if len(batch):
        mean, cov, ids, innov = _skf_update_raw(mean, cov, nf, batch)
    else:
        ids, innov = np.zeros(0, dtype=int), np.zeros((0, 2))
    return GaussianBelief.trusted(mean, cov, belief.tick), ids, innov
