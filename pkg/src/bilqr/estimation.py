"""Closed-loop estimators (joint EKF, least-squares regression) and belief metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .belief_dynamics import _kalman_gain, joint_jacobian
from .core import GaussianBelief, ProblemDims, marginal_param_cov, symmetrize
from .models import AircraftParams, CartPoleParams, ModelSpec, cartpole_step

LOGLIK_JITTER = 1e-12


class RankDeficiencyError(np.linalg.LinAlgError):
    """Regression data carry no information about some parameter direction."""


@dataclass(frozen=True)
class TransitionSample:
    x: np.ndarray
    a: np.ndarray
    x_next: np.ndarray


@dataclass(frozen=True)
class MetricSnapshot:
    t: int
    trace_param_cov: float
    log_lik_true_param: float
    stage_reward: float

    def __post_init__(self):
        if self.trace_param_cov < 0:
            raise ValueError("trace of a covariance cannot be negative")


def ekf_update(b: GaussianBelief, a, o, model: ModelSpec, W=None) -> GaussianBelief:
    """One predict/correct cycle of the joint state-parameter EKF (Joseph-form update)."""
    d = model.dims
    a = np.asarray(a, dtype=float).reshape(-1)
    o = np.asarray(o, dtype=float).reshape(-1)
    if o.size != d.n_o:
        raise ValueError(f"observation has length {o.size}, expected {d.n_o}")
    mu_x, mu_t = b.mean[: d.n_x], b.mean[d.n_x:]
    A = joint_jacobian(model, mu_x, a, mu_t)
    W = model.W_joint if W is None else W
    mean_pred = np.concatenate([model.step(mu_x, a, mu_t), mu_t])
    P = symmetrize(A @ b.cov @ A.T + W)
    C = model.C_joint
    K = _kalman_gain(P, C, model.V)
    innovation = o - model.observe(mean_pred[: d.n_x], a)
    IKC = np.eye(d.n) - K @ C
    cov = IKC @ P @ IKC.T + K @ model.V @ K.T
    return GaussianBelief(mean_pred + K @ innovation, cov)


def param_cov_trace(b: GaussianBelief, dims: ProblemDims) -> float:
    return float(np.trace(marginal_param_cov(b, dims)))


def param_log_likelihood(b: GaussianBelief, theta_true) -> float:
    """log N(theta_true; mu_theta, Sigma_theta_theta) of the parameter marginal."""
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    k = theta_true.size
    mu = b.mean[-k:]
    cov = b.cov[-k:, -k:]
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(cov + LOGLIK_JITTER * np.eye(k))
    z = sla.solve_triangular(L, theta_true - mu, lower=True)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * k * math.log(2 * math.pi))


# ---------------------------------------------------------------------------
# regression baseline

@dataclass(frozen=True)
class RegressionFit:
    theta: np.ndarray
    cov: np.ndarray | None   # None when there are too few residuals to estimate noise
    residual_var: float | None


def _stack(samples):
    if not samples:
        raise RankDeficiencyError("no regression samples")
    X = np.array([np.asarray(s.x, dtype=float).reshape(-1) for s in samples])
    A = np.array([np.asarray(s.a, dtype=float).reshape(-1) for s in samples])
    Xn = np.array([np.asarray(s.x_next, dtype=float).reshape(-1) for s in samples])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(A)) and np.all(np.isfinite(Xn))):
        raise RankDeficiencyError("non-finite regression samples")
    return X, A, Xn


def _ls_cov(J, rss, n_params):
    dof = J.shape[0] - n_params
    if dof <= 0:
        return None, None
    s2 = rss / dof
    return s2 * np.linalg.inv(J.T @ J), s2


def _check_rank(J, tol=1e-10):
    sv = np.linalg.svd(J, compute_uv=False)
    if sv.size == 0 or sv[-1] <= tol * max(1.0, sv[0]) or J.shape[0] < J.shape[1]:
        raise RankDeficiencyError("regression normal equations are singular (uninformative excitation)")


def _fit_aircraft(samples, params: AircraftParams) -> RegressionFit:
    X, A, Xn = _stack(samples)
    zero = np.zeros(8)
    J = np.vstack([params.theta_jacobian(x, a) for x, a in zip(X, A)])
    y = np.concatenate([xn - _aircraft_apply(params, zero, x, a) for x, a, xn in zip(X, A, Xn)])
    _check_rank(J)
    theta, *_ = np.linalg.lstsq(J, y, rcond=None)
    rss = float(np.sum((y - J @ theta) ** 2))
    cov, s2 = _ls_cov(J, rss, 8)
    return RegressionFit(theta, cov, s2)


def _aircraft_apply(params, theta, x, a):
    p1, p2 = params.matrices(theta)
    return p1 @ x + p2 @ a


def _fit_cartpole(samples, params: CartPoleParams, theta0: float, iters=20) -> RegressionFit:
    """Gauss-Newton over the pole mass on the Euler-step residual."""
    X, A, Xn = _stack(samples)

    def residual(m):
        th = math.log(m)
        return np.concatenate([xn - cartpole_step(x, a, th, params.dt, params)
                               for x, a, xn in zip(X, A, Xn)])

    with np.errstate(over="ignore", invalid="ignore"):
        return _gauss_newton_mass(residual, theta0, iters)


def _gauss_newton_mass(residual, theta0, iters):
    def jac(m):
        h = 1e-6 * m
        return ((residual(m + h) - residual(m - h)) / (2 * h)).reshape(-1, 1)

    m = math.exp(theta0)
    r = residual(m)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise RankDeficiencyError("regression residual overflow")
    step_scale = 1.0
    for _ in range(iters):
        J = jac(m)
        _check_rank(J)
        delta = -float(np.linalg.lstsq(J, r, rcond=None)[0][0])
        m_new = m + step_scale * delta
        while m_new <= 0:
            step_scale *= 0.5
            m_new = m + step_scale * delta
        r_new = residual(m_new)
        cost_new = float(r_new @ r_new)
        if not cost_new <= cost:
            step_scale *= 0.5
            continue
        m, r, cost = m_new, r_new, cost_new
        if abs(step_scale * delta) < 1e-12 * max(1.0, m):
            break
    # covariance in log-mass coordinates: d r / d theta = m * d r / d m
    J_theta = m * jac(m)
    _check_rank(J_theta)
    cov, s2 = _ls_cov(J_theta, cost, 1)
    return RegressionFit(np.array([math.log(m)]), cov, s2)


def regression_fit_full(samples, model, theta0=None) -> RegressionFit:
    params = model.params if isinstance(model, ModelSpec) else model
    if isinstance(params, AircraftParams):
        return _fit_aircraft(samples, params)
    if isinstance(params, CartPoleParams):
        th0 = 0.0 if theta0 is None else float(np.atleast_1d(theta0)[0])
        return _fit_cartpole(samples, params, th0)
    raise TypeError(f"regression not available for {type(params).__name__}")


def regression_fit(samples, model, theta0=None) -> np.ndarray:
    """Least-squares parameter estimate from fully observed transitions."""
    return regression_fit_full(samples, model, theta0).theta
