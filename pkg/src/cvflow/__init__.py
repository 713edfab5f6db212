"""Constraint-violation-trained normalizing flows for action-constrained RL."""

__version__ = "0.1.0"
