"""Comparison policies: uniform random inputs and certainty-equivalent MPC."""
from __future__ import annotations

import numpy as np

from .models import ModelError, ModelSpec
from .planner import LQProblem, PlannerConfig, RewardExpansion, ilqr_solve


def random_action(a_min, a_max, rng: np.random.Generator) -> np.ndarray:
    a_min = np.atleast_1d(np.asarray(a_min, dtype=float))
    a_max = np.atleast_1d(np.asarray(a_max, dtype=float))
    return a_min + (a_max - a_min) * rng.random(a_min.shape)


class MeanStateProblem(LQProblem):
    """Quadratic tracking on the mean dynamics with parameters frozen at an estimate."""

    def __init__(self, model: ModelSpec, theta_hat, cfg: PlannerConfig, horizon: int):
        self.model = model
        self.theta = np.asarray(theta_hat, dtype=float).reshape(-1)
        self.cfg = cfg
        self.horizon = horizon
        self.a_min, self.a_max = model.a_min, model.a_max

    def step(self, z, a):
        return self.model.step(z, a, self.theta)

    def linearize(self, z, a):
        fx, _, fa = self.model.jacobians(z, a, self.theta)
        return fx, fa

    def reward(self, z, a, t):
        e = z - self.cfg.goal
        r = float(e @ self.cfg.Q @ e)
        if a is not None:
            r += float(a @ self.cfg.R @ a)
        return r

    def expansion(self, z, a, t):
        e = z - self.cfg.goal
        n_a = self.model.dims.n_a
        r_a = np.zeros(n_a) if a is None else 2.0 * self.cfg.R @ a
        r_aa = np.zeros((n_a, n_a)) if a is None else 2.0 * self.cfg.R
        return RewardExpansion(self.reward(z, a, t), 2.0 * self.cfg.Q @ e, r_a,
                               2.0 * self.cfg.Q, r_aa, np.zeros((n_a, z.size)))


def mpc_plan(mu_x, theta_hat, cfg: PlannerConfig, model: ModelSpec, horizon: int | None = None,
             init_actions=None):
    """Certainty-equivalent finite-horizon plan on the mean state.

    For the linear aircraft model the problem is linear-quadratic, so the first
    full iLQR step is the exact finite-horizon LQR solution.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    if not np.all(np.isfinite(theta_hat)):
        raise ValueError("parameter estimate must be finite")
    H = cfg.horizon if horizon is None else horizon
    problem = MeanStateProblem(model, theta_hat, cfg, H)
    mu_x = np.asarray(mu_x, dtype=float)
    if init_actions is not None:
        candidates = [np.asarray(init_actions, dtype=float)]
    else:
        candidates = [np.zeros((H, model.dims.n_a))]
        lqr = _goal_lqr_actions(problem, mu_x)
        if lqr is not None:
            candidates.append(lqr)
    best = None
    for init in candidates:
        traj, info = ilqr_solve(problem, mu_x, init, cfg)
        if best is None or traj.total_reward > best[0].total_reward:
            best = (traj, info)
    traj, traj.info = best
    return traj


def _goal_lqr_actions(problem: MeanStateProblem, mu_x):
    """Nominal from the LQR policy linearized at the goal, or None if the goal is not a rest point.

    A zero nominal can send iLQR into a poor basin on an unstable nonlinear
    plant (the open-loop rollout falls over); seeding a second solve from the
    local regulator keeps the better of the two optima.
    """
    model, cfg, H = problem.model, problem.cfg, problem.horizon
    goal, a0 = cfg.goal, np.zeros(model.dims.n_a)
    try:
        if np.linalg.norm(problem.step(goal, a0) - goal) > 1e-9 * max(1.0, np.linalg.norm(goal)):
            return None
        A, B = problem.linearize(goal, a0)
        P = cfg.Q
        gains = [None] * H
        for t in reversed(range(H)):
            gains[t] = -np.linalg.solve(cfg.R + B.T @ P @ B, B.T @ P @ A)
            P = cfg.Q + A.T @ P @ A + (B.T @ P @ A).T @ gains[t]
        acts, x = np.zeros((H, model.dims.n_a)), mu_x
        for t in range(H):
            acts[t] = problem.clamp(gains[t] @ (x - goal))
            x = problem.step(x, acts[t])
    except (np.linalg.LinAlgError, ModelError):
        return None
    return acts if np.all(np.isfinite(acts)) else None


def mpc_action(mu_x, theta_hat, cfg: PlannerConfig, model: ModelSpec, horizon: int | None = None) -> np.ndarray:
    return mpc_plan(mu_x, theta_hat, cfg, model, horizon).actions[0].copy()


class MPCController:
    """Receding-horizon wrapper with the same horizon schedule and warm start as the belief planner."""

    def __init__(self, model: ModelSpec, cfg: PlannerConfig):
        self.model, self.cfg = model, cfg
        self._prev = None

    def reset(self):
        self._prev = None

    def horizon_at(self, t):
        if self.cfg.shrinking and self.cfg.window is None:
            return max(1, self.cfg.horizon - t)
        return self.cfg.window or self.cfg.horizon

    def step(self, mu_x, theta_hat, t: int = 0) -> np.ndarray:
        H = self.horizon_at(t)
        n_a = self.model.dims.n_a
        init = None
        if self.cfg.warm_start and self._prev is not None:
            init = self._prev[1:H + 1]
            if init.shape[0] < H:
                init = np.vstack([init, np.zeros((H - init.shape[0], n_a))])
        traj = mpc_plan(mu_x, theta_hat, self.cfg, self.model, H, init)
        self._prev = traj.actions
        return traj.actions[0].copy()
