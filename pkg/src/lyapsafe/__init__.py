"""Lyapunov-based uncertainty-aware safe reinforcement learning on grid-world CMDPs."""

__version__ = "0.1.0"
