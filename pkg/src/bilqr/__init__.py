"""Belief-space iterative LQR for joint state and parameter estimation, informative input design
and model identification adaptive control, with cart-pole and aircraft benchmarks."""
from .belief_dynamics import belief_step, linearize_belief_dynamics, propagate_covariance
from .core import GaussianBelief, ProblemDims, flatten, marginal_param_cov, unflatten
from .estimation import ekf_update, param_cov_trace, param_log_likelihood, regression_fit
from .harness import Scenario, aggregate, run_cell, run_episode
from .models import make_aircraft, make_cartpole, make_model
from .planner import PlannerConfig, RecedingHorizonPlanner, default_planner_config, plan

__all__ = [
    "GaussianBelief", "PlannerConfig", "ProblemDims", "RecedingHorizonPlanner", "Scenario",
    "aggregate", "belief_step", "default_planner_config", "ekf_update", "flatten",
    "linearize_belief_dynamics", "make_aircraft", "make_cartpole", "make_model",
    "marginal_param_cov", "param_cov_trace", "param_log_likelihood", "plan",
    "propagate_covariance", "regression_fit", "run_cell", "run_episode", "unflatten",
]
