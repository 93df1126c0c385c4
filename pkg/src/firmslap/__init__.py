"""Belief-space roadmap planning with online rollout replanning."""

__version__ = "0.1.0"
