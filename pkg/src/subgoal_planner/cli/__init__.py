"""CLI module for the subgoal planner."""
