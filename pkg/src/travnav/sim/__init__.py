"""Deterministic 2D simulator for closed-loop episodes."""
from .episode import EpisodeResult, SimConfig, config_from_dict, run_episode, run_suite
from .render import render_classes, render_view
from .world import CANONICAL, WorldSpec, ground_truth_grid, load_world

__all__ = ["CANONICAL", "EpisodeResult", "SimConfig", "WorldSpec", "config_from_dict",
           "ground_truth_grid", "load_world", "render_classes", "render_view", "run_episode", "run_suite"]
