"""Drone base-station trajectory design with meta-gradient policy gradient."""
from .scenario import ScenarioSpec, generate_realization, success_rate
from .mdp import enumerate_optimal, rollout
from .learner import LearnerConfig, mgpg_train, vanilla_pg_train
from .harness import ExperimentSpec, run_campaign, emit_plot_data

__version__ = "0.1.0"
