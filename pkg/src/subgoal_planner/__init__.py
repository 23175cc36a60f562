"""Subgoal Planner - hierarchical latent planning with diffusion subgoals and flow segments."""

__version__ = "0.1.0"
