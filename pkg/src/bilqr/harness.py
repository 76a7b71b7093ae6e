"""Closed-loop episode simulation, solver/estimator pairings and aggregation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import MPCController, random_action
from .belief_dynamics import InnovationError
from .core import BeliefError, GaussianBelief
from .estimation import (MetricSnapshot, RankDeficiencyError, TransitionSample, ekf_update,
                         param_cov_trace, param_log_likelihood, regression_fit_full)
from .models import FULL, OBSERVABILITY, ModelError, ModelSpec, make_model
from .planner import MODES, PlannerConfig, PlannerError, RecedingHorizonPlanner, default_planner_config, stage_reward

log = logging.getLogger(__name__)

SOLVERS = ("bilqr", "mpc", "random")
ESTIMATORS = ("ekf", "regression")
METRICS = ("trace", "loglik", "reward")


class ScenarioError(ValueError):
    """Invalid scenario or solver/estimator pairing."""


@dataclass(frozen=True)
class Disturbance:
    t_c: int
    theta_new: tuple


@dataclass(frozen=True, eq=False)
class Scenario:
    """One experimental condition. Unset fields fall back to per-model defaults."""

    name: str
    model: str = "cartpole"
    observability: str = FULL
    task: str = "sysid"
    episode_len: int = 30
    n_sims: int = 30
    seed: int = 0
    disturbance: Disturbance | None = None
    prior_theta_mean: tuple | None = None
    prior_theta_var: float | None = None
    prior_theta_jitter: float | None = None
    prior_state_var: float = 0.01
    x0: tuple | None = None
    W_x: float | None = None
    W_theta: float | None = None
    V: float | None = None
    full_obs_eps: float = 1e-6
    planner: dict = field(default_factory=dict)
    model_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in ("cartpole", "aircraft"):
            raise ScenarioError(f"unknown model {self.model!r}")
        if self.observability not in OBSERVABILITY:
            raise ScenarioError(f"unknown observability {self.observability!r}")
        if self.task not in MODES:
            raise ScenarioError(f"unknown task {self.task!r}")
        if self.episode_len < 1:
            raise ScenarioError("episode_len must be at least 1")
        if self.n_sims < 1:
            raise ScenarioError("n_sims must be at least 1")
        if self.disturbance is not None and not 0 < self.disturbance.t_c < self.episode_len:
            raise ScenarioError("disturbance t_c must lie inside the episode")

    def build_model(self) -> ModelSpec:
        kw = dict(full_obs_eps=self.full_obs_eps)
        for name in ("W_x", "W_theta", "V"):
            if getattr(self, name) is not None:
                kw[name] = getattr(self, name)
        if self.x0 is not None:
            kw["x0"] = self.x0
        if self.model_params:
            from .models import AircraftParams, CartPoleParams
            cls = CartPoleParams if self.model == "cartpole" else AircraftParams
            kw["params"] = cls(**self.model_params)
        return make_model(self.model, self.observability, **kw)

    def planner_config(self, model: ModelSpec) -> PlannerConfig:
        kw = {"horizon": self.episode_len, **self.planner}
        return default_planner_config(model, **kw)

    def prior(self, model: ModelSpec, rng: np.random.Generator) -> GaussianBelief:
        d = model.dims
        if model.name == "cartpole":
            mean = np.zeros(1) if self.prior_theta_mean is None else np.asarray(self.prior_theta_mean, float)
            var = 1.0 if self.prior_theta_var is None else self.prior_theta_var
            jitter = 0.0 if self.prior_theta_jitter is None else self.prior_theta_jitter
        else:
            mean = model.theta_true if self.prior_theta_mean is None else np.asarray(self.prior_theta_mean, float)
            var = 6.0 if self.prior_theta_var is None else self.prior_theta_var
            jitter = 0.5 if self.prior_theta_jitter is None else self.prior_theta_jitter
        mean = np.broadcast_to(mean, (d.n_theta,)).astype(float)
        if jitter > 0:
            mean = mean + jitter * rng.standard_normal(d.n_theta)
        return GaussianBelief.from_blocks(model.x0, mean, self.prior_state_var * np.eye(d.n_x),
                                          var * np.eye(d.n_theta))


@dataclass(eq=False)
class EpisodeRecord:
    scenario: str
    solver: str
    estimator: str
    seed: int
    episode: int
    true_states: np.ndarray
    true_theta: np.ndarray
    actions: np.ndarray
    observations: np.ndarray
    belief_means: np.ndarray
    belief_covs: np.ndarray
    metrics: list
    failed: bool = False
    failure: str = ""

    @property
    def terminal_trace(self) -> float:
        return self.metrics[-1].trace_param_cov

    @property
    def terminal_loglik(self) -> float:
        return self.metrics[-1].log_lik_true_param

    @property
    def mean_reward(self) -> float:
        return float(np.mean([m.stage_reward for m in self.metrics[1:]])) if len(self.metrics) > 1 else math.nan

    def summary(self) -> dict:
        return {"trace": self.terminal_trace, "loglik": self.terminal_loglik, "reward": self.mean_reward}


@dataclass(frozen=True)
class AggregateResult:
    scenario: str
    solver: str
    estimator: str
    n: int
    n_failed: int
    mean: dict
    se: dict

    @property
    def label(self) -> str:
        return f"{self.solver}+{self.estimator}"


def _rng(child) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(child))


def episode_streams(seed: int, episode: int):
    """Independent counter-based streams for prior, process noise, observation noise and policy."""
    ss = np.random.SeedSequence([int(seed), int(episode)])
    return [_rng(c) for c in ss.spawn(4)]


def check_pairing(scenario: Scenario, solver: str, estimator: str):
    if solver not in SOLVERS:
        raise ScenarioError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    if estimator not in ESTIMATORS:
        raise ScenarioError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    if estimator == "regression" and scenario.observability != FULL:
        raise ScenarioError("regression requires full observability; it is not defined for partial observations")


class _RegressionEstimator:
    def __init__(self, model: ModelSpec, prior: GaussianBelief):
        self.model = model
        self.prior = prior
        self.samples = []
        d = model.dims
        self.last_x = prior.mean[: d.n_x].copy()

    def update(self, b, a, o):
        d = self.model.dims
        self.samples.append(TransitionSample(self.last_x, np.asarray(a, float), o.copy()))
        self.last_x = o.copy()
        mu_t = self.prior.mean[d.n_x:]
        cov_t = self.prior.cov[d.n_x:, d.n_x:]
        try:
            fit = regression_fit_full(self.samples, self.model, mu_t)
            if fit.cov is not None and np.all(np.isfinite(fit.theta)) and np.all(np.isfinite(fit.cov)):
                mu_t, cov_t = fit.theta, fit.cov
        except RankDeficiencyError:
            pass
        return GaussianBelief.from_blocks(o, mu_t, self.model.V, cov_t)


def run_episode(scenario: Scenario, solver: str, estimator: str, episode: int = 0) -> EpisodeRecord:
    """Simulate one closed-loop episode; randomness is keyed on (scenario.seed, episode)."""
    check_pairing(scenario, solver, estimator)
    model = scenario.build_model()
    cfg = scenario.planner_config(model)
    d = model.dims
    rng_prior, rng_proc, rng_obs, rng_pol = episode_streams(scenario.seed, episode)
    b = scenario.prior(model, rng_prior)
    x = model.x0.copy()
    theta = model.theta_true.copy()
    T = scenario.episode_len

    planner = RecedingHorizonPlanner(model, cfg, scenario.task) if solver == "bilqr" else None
    mpc = MPCController(model, cfg) if solver == "mpc" else None
    reg_est = _RegressionEstimator(model, b) if estimator == "regression" else None
    Lx = np.linalg.cholesky(model.W_x + 1e-300 * np.eye(d.n_x)) if np.any(model.W_x) else None
    Lv = np.linalg.cholesky(model.V)

    xs, thetas, acts, obs, means, covs = [x.copy()], [theta.copy()], [], [], [b.mean], [b.cov]
    metrics = [MetricSnapshot(0, param_cov_trace(b, d), param_log_likelihood(b, theta), 0.0)]
    failed, failure = False, ""
    for t in range(T):
        try:
            if solver == "bilqr":
                a = planner.step(b, t)
            elif solver == "mpc":
                a = mpc.step(b.mean[: d.n_x], b.mean[d.n_x:], t)
            else:
                a = random_action(model.a_min, model.a_max, rng_pol)
            a = model.clamp(a)
            reward = stage_reward(b, a, t, cfg, scenario.task, d, tau=T)
            x = model.step(x, a, theta)
            if Lx is not None:
                x = x + Lx @ rng_proc.standard_normal(d.n_x)
            if scenario.disturbance is not None and t + 1 == scenario.disturbance.t_c:
                theta = np.asarray(scenario.disturbance.theta_new, dtype=float).reshape(d.n_theta)
            o = model.observe(x, a) + Lv @ rng_obs.standard_normal(d.n_o)
            b = reg_est.update(b, a, o) if reg_est else ekf_update(b, a, o, model)
        except (PlannerError, InnovationError, ModelError, BeliefError, np.linalg.LinAlgError) as exc:
            failed, failure = True, f"t={t}: {type(exc).__name__}: {exc}"
            log.warning("episode %d of %s (%s+%s) failed: %s", episode, scenario.name, solver, estimator, failure)
            break
        if t + 1 == T:
            reward += stage_reward(b, None, T, cfg, scenario.task, d, tau=T)
        xs.append(x.copy())
        thetas.append(theta.copy())
        acts.append(a)
        obs.append(o)
        means.append(b.mean)
        covs.append(b.cov)
        metrics.append(MetricSnapshot(t + 1, param_cov_trace(b, d), param_log_likelihood(b, theta), reward))

    return EpisodeRecord(
        scenario=scenario.name, solver=solver, estimator=estimator, seed=scenario.seed, episode=episode,
        true_states=np.array(xs), true_theta=np.array(thetas),
        actions=np.array(acts).reshape(-1, d.n_a), observations=np.array(obs).reshape(-1, d.n_o),
        belief_means=np.array(means), belief_covs=np.array(covs), metrics=metrics,
        failed=failed, failure=failure)


def _run_one(args):
    return run_episode(*args)


def run_cell(scenario: Scenario, solver: str, estimator: str, jobs: int = 1) -> list[EpisodeRecord]:
    """All episodes of one scenario x solver cell, ordered by episode index."""
    check_pairing(scenario, solver, estimator)
    tasks = [(scenario, solver, estimator, i) for i in range(scenario.n_sims)]
    if jobs <= 1:
        return [run_episode(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_one, tasks))


class InsufficientDataError(ValueError):
    pass


def aggregate(records: list[EpisodeRecord]) -> AggregateResult:
    """Mean and standard error (sample std / sqrt(n)) of the terminal metrics over successful episodes."""
    ok = [r for r in records if not r.failed]
    if len(ok) < 2:
        raise InsufficientDataError(f"need at least 2 successful episodes, got {len(ok)}")
    first = ok[0]
    mean, se = {}, {}
    for key in METRICS:
        vals = np.array([r.summary()[key] for r in ok], dtype=float)
        mean[key] = float(np.mean(vals))
        se[key] = float(np.std(vals, ddof=1) / math.sqrt(vals.size))
    return AggregateResult(first.scenario, first.solver, first.estimator, len(ok),
                           len(records) - len(ok), mean, se)


def disturbance_tracking_stats(record: EpisodeRecord, t_c: int, theta_old, theta_new):
    """(detection delay in steps, terminal |mu_theta - theta_new|); delay is inf if never detected."""
    theta_old = np.atleast_1d(np.asarray(theta_old, dtype=float))
    theta_new = np.atleast_1d(np.asarray(theta_new, dtype=float))
    k = theta_new.size
    mu = record.belief_means[:, -k:]
    delay = math.inf
    for t in range(t_c + 1, mu.shape[0]):
        if np.linalg.norm(mu[t] - theta_new) < np.linalg.norm(mu[t] - theta_old):
            delay = t - t_c
            break
    return delay, float(np.linalg.norm(mu[-1] - theta_new))
