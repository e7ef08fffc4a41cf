"""Occupancy-based reward shaping for offline goal-conditioned RL."""

__version__ = "0.1.0"
