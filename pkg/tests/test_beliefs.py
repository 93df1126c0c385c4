"""Belief container, angle helpers, and seeded substream behavior."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from firmslap.beliefs import (BeliefRegion, BeliefValidationError,
                              GaussianBelief, angle_diff, belief_distance,
                              is_in_region, wrap_angle, wrap_angles)
from firmslap.rng import substream


finite_angles = st.floats(min_value=-1e6, max_value=1e6,
                          allow_nan=False, allow_infinity=False)


@given(finite_angles)
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -np.pi < w <= np.pi


@given(finite_angles)
def test_wrap_angle_preserves_direction(theta):
    w = wrap_angle(theta)
    # difference is an exact multiple of 2*pi (up to float error at scale)
    k = (theta - w) / (2.0 * np.pi)
    assert abs(k - round(k)) < 1e-6


def test_wrap_angles_vectorized_matches_scalar():
    thetas = np.linspace(-12.0, 12.0, 101)
    vec = wrap_angles(thetas)
    scalar = np.array([wrap_angle(t) for t in thetas])
    np.testing.assert_allclose(vec, scalar, atol=1e-12)


@given(finite_angles, finite_angles)
def test_angle_diff_antisymmetric_modulo_pi(a, b):
    d1 = angle_diff(a, b)
    assert -np.pi < d1 <= np.pi
    # a == b + d1 (mod 2*pi)
    assert abs(wrap_angle(b + d1 - a)) < 1e-6


def test_belief_validates_symmetry():
    cov = np.array([[1.0, 0.5, 0.0], [0.2, 1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(BeliefValidationError):
        GaussianBelief(np.zeros(3), cov)


def test_belief_validates_psd():
    cov = np.diag([1.0, -0.5, 1.0])
    with pytest.raises(BeliefValidationError):
        GaussianBelief(np.zeros(3), cov)


def test_belief_rejects_non_finite():
    with pytest.raises(BeliefValidationError):
        GaussianBelief(np.array([0.0, np.nan, 0.0]), np.eye(3))


def test_belief_wraps_heading_and_freezes_arrays():
    b = GaussianBelief(np.array([1.0, 2.0, 3.0 * np.pi]), np.eye(3))
    assert abs(b.heading - np.pi) < 1e-12
    with pytest.raises(ValueError):
        b.mean[0] = 5.0


def test_belief_distance_components():
    a = GaussianBelief(np.array([0.0, 0.0, 0.0]), np.eye(3))
    b = GaussianBelief(np.array([3.0, 4.0, 0.1]), 2.0 * np.eye(3))
    d = belief_distance(a, b)
    assert abs(d.position - 5.0) < 1e-12
    assert abs(d.angle - 0.1) < 1e-12
    assert abs(d.cov - np.linalg.norm(np.eye(3), "fro")) < 1e-12


def test_region_membership_inclusive_boundaries():
    center = GaussianBelief(np.zeros(3), np.eye(3))
    region = BeliefRegion(center, pos_radius=0.5, ang_radius=0.2,
                          cov_radius=1.0)
    inside = GaussianBelief(np.array([0.5, 0.0, 0.2]), np.eye(3))
    assert is_in_region(inside, region)
    outside_pos = GaussianBelief(np.array([0.51, 0.0, 0.0]), np.eye(3))
    assert not is_in_region(outside_pos, region)
    outside_cov = GaussianBelief(np.zeros(3), 2.0 * np.eye(3))
    assert not is_in_region(outside_cov, region)


def test_region_rejects_bad_radii():
    center = GaussianBelief(np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        BeliefRegion(center, pos_radius=0.0)


# --- seeded substreams ----------------------------------------------------------


def test_substream_deterministic():
    a = substream(7, 3, 11).standard_normal(8)
    b = substream(7, 3, 11).standard_normal(8)
    np.testing.assert_array_equal(a, b)


def test_substream_distinct_keys_decorrelated():
    a = substream(7, 3, 11).standard_normal(64)
    b = substream(7, 3, 12).standard_normal(64)
    c = substream(8, 3, 11).standard_normal(64)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_substream_independent_of_draw_order():
    # Drawing from one stream never perturbs another.
    s1 = substream(0, 1)
    _ = s1.standard_normal(100)
    fresh = substream(0, 2).standard_normal(4)
    np.testing.assert_array_equal(fresh, substream(0, 2).standard_normal(4))
