"""Gaussian beliefs over planar pose and node regions in belief space.

A belief is (mean, covariance) over (x, y, theta).  Node regions are balls
in the product metric: Euclidean position distance, smallest-angle heading
distance, and Frobenius distance between covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

STATE_DIM = 3

# Tolerances for covariance validation.
_SYM_TOL = 1e-9
_PSD_TOL = -1e-9


_TWO_PI = 2.0 * np.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = (float(theta) + np.pi) % _TWO_PI - np.pi
    return np.pi if wrapped == -np.pi else wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    wrapped = np.mod(theta + np.pi, _TWO_PI) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def angle_diff(a: float, b: float) -> float:
    """Smallest signed angle taking b to a, in (-pi, pi]."""
    return wrap_angle(a - b)


class BeliefValidationError(ValueError):
    """Covariance failed symmetry or positive-semidefiniteness checks."""


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian pose belief.

    mean: (3,) array (x, y, theta), heading stored wrapped to (-pi, pi].
    cov: (3, 3) symmetric PSD covariance.
    tick: simulation tick the belief refers to.
    """

    mean: np.ndarray
    cov: np.ndarray
    tick: int = 0

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=float).reshape(STATE_DIM)
        mean[2] = wrap_angle(mean[2])
        cov = np.array(self.cov, dtype=float).reshape(STATE_DIM, STATE_DIM)
        if not np.isfinite(mean).all() or not np.isfinite(cov).all():
            raise BeliefValidationError("non-finite belief")
        asym = cov - cov.T
        if max(asym.max(), -asym.min()) > _SYM_TOL:
            raise BeliefValidationError("covariance not symmetric")
        cov += cov.T
        cov *= 0.5
        # Cholesky of cov shifted by the PSD tolerance succeeds exactly when
        # every eigenvalue is above -tolerance.
        try:
            np.linalg.cholesky(cov - _PSD_TOL * np.eye(STATE_DIM))
        except np.linalg.LinAlgError:
            raise BeliefValidationError("covariance not PSD") from None
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def trusted(cls, mean: np.ndarray, cov: np.ndarray, tick: int = 0
                ) -> "GaussianBelief":
        """Wrap filter output without validation or defensive copies.

        Only for internal hot paths whose producers already guarantee a
        wrapped heading and a symmetrized PSD covariance; ownership of the
        arrays transfers to the belief.
        """
        b = object.__new__(cls)
        object.__setattr__(b, "mean", mean)
        object.__setattr__(b, "cov", cov)
        object.__setattr__(b, "tick", tick)
        return b

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def heading(self) -> float:
        return float(self.mean[2])

    def at_tick(self, tick: int) -> "GaussianBelief":
        return GaussianBelief(self.mean, self.cov, tick)


class BeliefDistance(NamedTuple):
    position: float
    angle: float
    cov: float


def belief_distance(a: GaussianBelief, b: GaussianBelief) -> BeliefDistance:
    """Componentwise distance between two beliefs.

    Position: Euclidean.  Angle: absolute smallest-angle difference.
    Covariance: Frobenius norm of the difference.
    """
    dp = float(np.linalg.norm(a.position - b.position))
    da = abs(angle_diff(a.heading, b.heading))
    dc = float(np.linalg.norm(a.cov - b.cov, ord="fro"))
    return BeliefDistance(dp, da, dc)


@dataclass(frozen=True)
class BeliefRegion:
    """Axis-wise ball around a center belief; membership is inclusive."""

    center: GaussianBelief
    pos_radius: float = 0.3
    ang_radius: float = 0.3
    cov_radius: float = field(default=0.0)

    def __post_init__(self) -> None:
        if self.pos_radius <= 0 or self.ang_radius <= 0 or self.cov_radius < 0:
            raise ValueError("region radii must be positive")


def is_in_region(b: GaussianBelief, region: BeliefRegion) -> bool:
    """True iff all three distance components are within the region radii."""
    d = belief_distance(b, region.center)
    return d.position <= region.pos_radius and d.angle <= region.ang_radius and d.cov <= region.cov_radius
