"""Adjustable-autonomy planning: strategy EU, MDP compilation, constrained solving."""

__version__ = "0.1.0"
