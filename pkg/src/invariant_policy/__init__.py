"""Invariant policy learning for multi-environment offline contextual bandits."""

__all__ = ["__version__"]

__version__ = "0.1.0"
