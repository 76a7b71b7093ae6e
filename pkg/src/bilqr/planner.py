"""Belief-space iLQR.

The optimizer is a plain reward-maximizing iLQR over a vector state ``z``; the
belief planner instantiates it with z = flattened Gaussian belief and the
deterministic maximum-likelihood belief transition. The certainty-equivalent
MPC baseline reuses the same engine on the mean state alone.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .belief_dynamics import InnovationError, belief_step_coords, linearize_belief_dynamics
from .core import GaussianBelief, ProblemDims, flatten, param_cov_indices, unflatten
from .models import ModelError, ModelSpec

log = logging.getLogger(__name__)

SYSID = "sysid"
MIAC = "miac"
SYSID_STAGEWISE = "sysid_stagewise"
MODES = (SYSID, MIAC, SYSID_STAGEWISE)


class PlannerError(RuntimeError):
    """The backward pass could not find a negative-definite action curvature."""


def _is_nsd(m, tol=1e-12):
    m = np.atleast_2d(m)
    return np.allclose(m, m.T, atol=1e-12) and np.linalg.eigvalsh(0.5 * (m + m.T))[-1] <= tol


@dataclass(frozen=True, eq=False)
class PlannerConfig:
    """Reward weights (negative semi-definite, reward is maximized) and solver settings.

    ``Lam`` acts on the column-stacked parameter covariance; ``info_weight``
    multiplies it for trade-off sweeps. ``horizon`` is the episode end used by
    the shrinking-horizon wrapper; ``window`` fixes the plan length instead.
    """

    Q: np.ndarray
    R: np.ndarray
    Lam: np.ndarray
    goal: np.ndarray
    horizon: int = 30
    info_weight: float = 1.0
    max_iters: int = 50
    conv_tol: float = 1e-4
    reg_init: float = 1e-6
    reg_scale: float = 10.0
    reg_decay: float = 0.5
    reg_max: float = 1e8
    line_search_alphas: tuple = tuple(2.0 ** -i for i in range(11))
    armijo: float = 0.1
    shrinking: bool = True
    window: int | None = None
    warm_start: bool = True
    clamp_actions: bool = True
    linearization: str = "analytic"
    zero_param_mean_block: bool = False
    printed_B_tilde: bool = False
    W_theta_planner: np.ndarray | None = None

    def __post_init__(self):
        for name in ("Q", "R", "Lam"):
            v = np.atleast_2d(np.array(getattr(self, name), dtype=float))
            if not _is_nsd(v):
                raise ValueError(f"{name} must be symmetric negative semi-definite")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "goal", np.array(self.goal, dtype=float).reshape(-1))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.info_weight < 0:
            raise ValueError("info_weight must be non-negative")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be at least 1")
        alphas = tuple(float(a) for a in self.line_search_alphas)
        if not alphas or any(not 0 < a <= 1 for a in alphas) or list(alphas) != sorted(alphas, reverse=True):
            raise ValueError("line_search_alphas must be a decreasing sequence in (0, 1]")
        object.__setattr__(self, "line_search_alphas", alphas)
        if self.W_theta_planner is not None:
            object.__setattr__(self, "W_theta_planner", np.atleast_2d(np.array(self.W_theta_planner, dtype=float)))

    @property
    def Lam_eff(self) -> np.ndarray:
        return self.info_weight * self.Lam

    def replace(self, **kw) -> "PlannerConfig":
        return replace(self, **kw)


def default_planner_config(model: ModelSpec, **overrides) -> PlannerConfig:
    """Weights used throughout the experiments unless the run config overrides them."""
    d = model.dims
    if model.name == "cartpole":
        base = dict(Q=-np.diag([0.1, 10.0, 0.1, 0.1]), R=-0.01 * np.eye(1),
                    Lam=-100.0 * np.eye(1), goal=np.array([0.0, math.pi, 0.0, 0.0]))
    elif model.name == "aircraft":
        base = dict(Q=-np.diag([0.1, 1.0, 1.0, 1.0]), R=-0.01 * np.eye(2),
                    Lam=-10.0 * np.eye(d.n_theta ** 2), goal=np.array([100.0, 0.0, 0.0, 0.0]))
    else:
        base = dict(Q=-np.eye(d.n_x), R=-0.01 * np.eye(d.n_a),
                    Lam=-np.eye(d.n_theta ** 2), goal=np.zeros(d.n_x))
    base.update(overrides)
    return PlannerConfig(**base)


# ---------------------------------------------------------------------------
# rewards

@dataclass(frozen=True, eq=False)
class RewardExpansion:
    """Exact second-order expansion of a quadratic stage reward."""

    value: float
    r_z: np.ndarray
    r_a: np.ndarray
    r_zz: np.ndarray
    r_aa: np.ndarray
    r_az: np.ndarray


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown planning mode {mode!r}; expected one of {MODES}")


def _coords_reward(z, a, t, tau, cfg: PlannerConfig, mode, dims: ProblemDims, param_idx):
    r = 0.0
    if mode == MIAC:
        e = z[: dims.n_x] - cfg.goal
        r += float(e @ cfg.Q @ e)
        if a is not None:
            r += float(a @ cfg.R @ a)
    if t == tau or mode == SYSID_STAGEWISE:
        s = z[param_idx]
        r += float(s @ cfg.Lam_eff @ s)
    return r


def _coords_expansion(z, a, t, tau, cfg: PlannerConfig, mode, dims: ProblemDims, param_idx):
    nz = z.size
    n_a = dims.n_a
    r_z = np.zeros(nz)
    r_zz = np.zeros((nz, nz))
    r_a = np.zeros(n_a)
    r_aa = np.zeros((n_a, n_a))
    r_az = np.zeros((n_a, nz))
    if mode == MIAC:
        e = z[: dims.n_x] - cfg.goal
        r_z[: dims.n_x] = 2.0 * cfg.Q @ e
        r_zz[: dims.n_x, : dims.n_x] = 2.0 * cfg.Q
        if a is not None:
            r_a = 2.0 * cfg.R @ a
            r_aa = 2.0 * cfg.R
    if t == tau or mode == SYSID_STAGEWISE:
        s = z[param_idx]
        Lam = cfg.Lam_eff
        r_z[param_idx] += 2.0 * Lam @ s
        r_zz[np.ix_(param_idx, param_idx)] += 2.0 * Lam
    value = _coords_reward(z, a, t, tau, cfg, mode, dims, param_idx)
    return RewardExpansion(value, r_z, r_a, r_zz, r_aa, r_az)


def stage_reward(b: GaussianBelief, a, t: int, cfg: PlannerConfig, mode: str,
                 dims: ProblemDims, tau: int | None = None) -> float:
    """Belief reward at step t; ``a`` is None at the terminal step."""
    _check_mode(mode)
    tau = cfg.horizon if tau is None else tau
    a = None if a is None else np.asarray(a, dtype=float).reshape(-1)
    return _coords_reward(flatten(b), a, t, tau, cfg, mode, dims, param_cov_indices(dims))


def reward_expansion(b_bar: GaussianBelief, a_bar, t: int, cfg: PlannerConfig, mode: str,
                     dims: ProblemDims, tau: int | None = None) -> RewardExpansion:
    _check_mode(mode)
    tau = cfg.horizon if tau is None else tau
    a_bar = None if a_bar is None else np.asarray(a_bar, dtype=float).reshape(-1)
    return _coords_expansion(flatten(b_bar), a_bar, t, tau, cfg, mode, dims, param_cov_indices(dims))


# ---------------------------------------------------------------------------
# generic iLQR engine

@dataclass(eq=False)
class Trajectory:
    """Nominal states z_0..z_H, actions a_0..a_{H-1}, per-step rewards r_0..r_H."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclass(eq=False)
class BeliefTrajectory(Trajectory):
    dims: ProblemDims | None = None

    @property
    def beliefs(self) -> list[GaussianBelief]:
        return [unflatten(z, self.dims) for z in self.states]


@dataclass(eq=False)
class FeedbackPolicy:
    """Affine law a_t = a_bar_t + alpha * k_t + K_t (z_t - z_bar_t)."""

    k: np.ndarray
    K: np.ndarray

    def __len__(self):
        return self.k.shape[0]


class LQProblem:
    """Interface the iLQR engine needs. Subclasses define the dynamics and reward."""

    horizon: int
    a_min: np.ndarray | None = None
    a_max: np.ndarray | None = None

    def step(self, z, a):
        raise NotImplementedError

    def linearize(self, z, a):
        raise NotImplementedError

    def reward(self, z, a, t):
        raise NotImplementedError

    def expansion(self, z, a, t) -> RewardExpansion:
        raise NotImplementedError

    def clamp(self, a):
        if self.a_min is None:
            return a
        return np.clip(a, self.a_min, self.a_max)


def rollout(problem: LQProblem, z0, actions, traj_cls=Trajectory, **extra) -> Trajectory:
    H = problem.horizon
    zs = np.zeros((H + 1, np.size(z0)))
    zs[0] = z0
    rewards = np.zeros(H + 1)
    for t in range(H):
        rewards[t] = problem.reward(zs[t], actions[t], t)
        zs[t + 1] = problem.step(zs[t], actions[t])
    rewards[H] = problem.reward(zs[H], None, H)
    return traj_cls(zs, np.array(actions, dtype=float), rewards, **extra)


def backward_pass(traj: Trajectory, jacs, expansions, reg: float = 0.0, reg_max: float = 1e8,
                  reg_scale: float = 10.0, reg_init: float = 1e-6):
    """Time-varying LQR recursion on the deviation system z' = A dz + B da.

    ``jacs[t]`` is (A_t, B_t); ``expansions[t]`` the reward expansion at step t
    (index H is terminal). Q_aa is shifted by -reg*I until negative definite.
    Returns (policy, (d1, d2), reg) where the predicted improvement of a step of
    size alpha is alpha*d1 + alpha**2*d2.
    """
    H = traj.horizon
    n_a = traj.actions.shape[1]
    nz = traj.states.shape[1]
    while True:
        term = expansions[H]
        S = term.r_zz.copy()
        s = term.r_z.copy()
        k = np.zeros((H, n_a))
        K = np.zeros((H, n_a, nz))
        d1 = d2 = 0.0
        failed = False
        for t in range(H - 1, -1, -1):
            A, B = jacs[t]
            ex = expansions[t]
            SA = S @ A
            SB = S @ B
            Q_z = ex.r_z + A.T @ s
            Q_a = ex.r_a + B.T @ s
            Q_zz = ex.r_zz + A.T @ SA
            Q_aa = ex.r_aa + B.T @ SB
            Q_az = ex.r_az + B.T @ SA
            Q_aa = 0.5 * (Q_aa + Q_aa.T)
            if not (np.isfinite(Q_aa).all() and np.isfinite(Q_a).all()):
                raise PlannerError(f"value recursion overflowed at step {t}; shorten the planning window")
            Q_reg = Q_aa - reg * np.eye(n_a)
            try:
                # reward convention: -Q_reg must be positive definite
                fac = sla.cho_factor(-Q_reg, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                failed = True
                break
            kt = sla.cho_solve(fac, Q_a, check_finite=False)
            Kt = sla.cho_solve(fac, Q_az, check_finite=False)
            k[t], K[t] = kt, Kt
            d1 += float(kt @ Q_a)
            d2 += 0.5 * float(kt @ Q_aa @ kt)
            s = Q_z + Kt.T @ Q_aa @ kt + Kt.T @ Q_a + Q_az.T @ kt
            S = Q_zz + Kt.T @ Q_aa @ Kt + Kt.T @ Q_az + Q_az.T @ Kt
            S = 0.5 * (S + S.T)
        if not failed:
            return FeedbackPolicy(k, K), (d1, d2), reg
        reg = max(reg_init, reg * reg_scale)
        if reg > reg_max:
            raise PlannerError("action curvature is not negative definite even with maximal regularization")


def forward_pass(problem: LQProblem, z0, prev: Trajectory, policy: FeedbackPolicy, alpha: float,
                 clamp: bool = True):
    """Roll out the feedback law; returns None if the rollout goes non-finite."""
    H = problem.horizon
    zs = np.zeros_like(prev.states)
    acts = np.zeros_like(prev.actions)
    rewards = np.zeros(H + 1)
    zs[0] = z0
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(H):
                a = prev.actions[t] + alpha * policy.k[t] + policy.K[t] @ (zs[t] - prev.states[t])
                if clamp:
                    a = problem.clamp(a)
                acts[t] = a
                rewards[t] = problem.reward(zs[t], a, t)
                zs[t + 1] = problem.step(zs[t], a)
            rewards[H] = problem.reward(zs[H], None, H)
    except (np.linalg.LinAlgError, ModelError, FloatingPointError, ValueError):
        return None
    if not (np.all(np.isfinite(zs)) and np.all(np.isfinite(rewards))):
        return None
    new = replace(prev, states=zs, actions=acts, rewards=rewards)
    return new


@dataclass
class SolveInfo:
    iterations: int = 0
    converged: bool = False
    reward_history: list = field(default_factory=list)


def ilqr_solve(problem: LQProblem, z0, init_actions, cfg: PlannerConfig, traj_cls=Trajectory,
               **extra) -> tuple[Trajectory, SolveInfo]:
    """Iterate linearize / backward / line-searched forward passes to convergence."""
    acts = np.array(init_actions, dtype=float)
    if cfg.clamp_actions:
        acts = np.array([problem.clamp(a) for a in acts]).reshape(acts.shape)
    traj = rollout(problem, z0, acts, traj_cls, **extra)
    info = SolveInfo(reward_history=[traj.total_reward])
    reg = 0.0
    H = problem.horizon
    jacs = exps = None
    for it in range(cfg.max_iters):
        info.iterations = it + 1
        if jacs is None:
            jacs = [problem.linearize(traj.states[t], traj.actions[t]) for t in range(H)]
            exps = [problem.expansion(traj.states[t], traj.actions[t], t) for t in range(H)]
            exps.append(problem.expansion(traj.states[H], None, H))
        policy, (d1, d2), reg = backward_pass(traj, jacs, exps, reg, cfg.reg_max, cfg.reg_scale, cfg.reg_init)
        if d1 + d2 < cfg.conv_tol:
            info.converged = True
            break
        accepted = None
        for alpha in cfg.line_search_alphas:
            cand = forward_pass(problem, z0, traj, policy, alpha, cfg.clamp_actions)
            if cand is None:
                continue
            actual = cand.total_reward - traj.total_reward
            predicted = alpha * d1 + alpha * alpha * d2
            if actual > 0 and actual >= cfg.armijo * predicted:
                accepted = (cand, actual)
                break
        if accepted is None:
            reg = max(cfg.reg_init, reg * cfg.reg_scale)
            if reg > cfg.reg_max:
                info.converged = True
                break
            continue
        traj, actual = accepted
        jacs = exps = None
        info.reward_history.append(traj.total_reward)
        reg *= cfg.reg_decay
        if reg < cfg.reg_init:
            reg = 0.0
        if actual < cfg.conv_tol:
            info.converged = True
            break
    return traj, info


# ---------------------------------------------------------------------------
# belief-space instantiation

class BeliefProblem(LQProblem):
    """iLQR problem over flattened beliefs with the maximum-likelihood belief transition."""

    def __init__(self, model: ModelSpec, cfg: PlannerConfig, mode: str, horizon: int):
        _check_mode(mode)
        self.model = model
        self.cfg = cfg
        self.mode = mode
        self.horizon = horizon
        self.dims = model.dims
        self.param_idx = param_cov_indices(model.dims)
        self.a_min, self.a_max = model.a_min, model.a_max
        W = model.W_joint
        if cfg.W_theta_planner is not None:
            W = W.copy()
            W[model.dims.n_x:, model.dims.n_x:] = cfg.W_theta_planner
        self.W = W

    def step(self, z, a):
        return belief_step_coords(z, a, self.model, self.W)

    def linearize(self, z, a):
        j = linearize_belief_dynamics(z, a, self.model, W=self.W, method=self.cfg.linearization,
                                      zero_param_mean_block=self.cfg.zero_param_mean_block,
                                      printed_B_tilde=self.cfg.printed_B_tilde)
        return j.A_tilde, j.B_tilde

    def reward(self, z, a, t):
        return _coords_reward(z, a, t, self.horizon, self.cfg, self.mode, self.dims, self.param_idx)

    def expansion(self, z, a, t):
        return _coords_expansion(z, a, t, self.horizon, self.cfg, self.mode, self.dims, self.param_idx)


def plan(b0: GaussianBelief, cfg: PlannerConfig, model: ModelSpec, mode: str,
         horizon: int | None = None, init_actions=None):
    """Solve the belief-space problem from b0; returns (first action, trajectory).

    The nominal action sequence defaults to zeros.
    """
    H = cfg.horizon if horizon is None else horizon
    problem = BeliefProblem(model, cfg, mode, H)
    if init_actions is None:
        init_actions = np.zeros((H, model.dims.n_a))
    traj, info = ilqr_solve(problem, flatten(b0), init_actions, cfg, BeliefTrajectory, dims=model.dims)
    log.debug("plan: %d iterations, reward %.6g", info.iterations, traj.total_reward)
    traj.info = info
    return traj.actions[0].copy(), traj


class RecedingHorizonPlanner:
    """Replans from each new belief and returns the first action.

    Stateful only through the warm-start cache; call ``reset`` between episodes.
    """

    def __init__(self, model: ModelSpec, cfg: PlannerConfig, mode: str):
        _check_mode(mode)
        self.model, self.cfg, self.mode = model, cfg, mode
        self._prev = None
        self.last_trajectory = None

    def reset(self):
        self._prev = None
        self.last_trajectory = None

    def horizon_at(self, t: int) -> int:
        if self.cfg.shrinking and self.cfg.window is None:
            return max(1, self.cfg.horizon - t)
        return self.cfg.window or self.cfg.horizon

    def _initial_actions(self, H):
        n_a = self.model.dims.n_a
        if not self.cfg.warm_start or self._prev is None:
            return np.zeros((H, n_a))
        shifted = self._prev[1:]
        if shifted.shape[0] >= H:
            return shifted[:H].copy()
        return np.vstack([shifted, np.zeros((H - shifted.shape[0], n_a))])

    def step(self, b: GaussianBelief, t: int = 0) -> np.ndarray:
        H = self.horizon_at(t)
        a0, traj = plan(b, self.cfg, self.model, self.mode, H, self._initial_actions(H))
        self._prev = traj.actions
        self.last_trajectory = traj
        return a0


def receding_horizon_step(b_t: GaussianBelief, cfg: PlannerConfig, model: ModelSpec, mode: str,
                          planner: RecedingHorizonPlanner | None = None, t: int = 0) -> np.ndarray:
    planner = planner or RecedingHorizonPlanner(model, cfg, mode)
    return planner.step(b_t, t)
