"""Deterministic belief transition under maximum-likelihood observations, and its
linearization in flattened belief coordinates."""
from __future__ import annotations

from dataclasses import dataclass

from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .core import GaussianBelief, flatten, symmetrize
from .models import ModelError, ModelSpec

MAX_INNOVATION_COND = 1e12


class InnovationError(np.linalg.LinAlgError):
    """Innovation covariance is numerically singular."""


@dataclass(frozen=True, eq=False)
class BeliefJacobians:
    A_tilde: np.ndarray
    B_tilde: np.ndarray


@lru_cache(maxsize=None)
def _eye(n):
    I = np.eye(n)
    I.setflags(write=False)
    return I


def _innovation_factor(S):
    w = np.linalg.eigvalsh(S)
    if not (w[0] > 0) or w[-1] / w[0] > MAX_INNOVATION_COND:
        raise InnovationError(
            f"innovation covariance is singular (eigenvalues {w[0]:.3e}..{w[-1]:.3e})")
    try:
        return sla.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise InnovationError(str(exc)) from exc


def _kalman_gain(P, C, V):
    S = C @ P @ C.T + V
    factor = _innovation_factor(S)
    # K = P C^T S^-1, solved as S K^T = C P
    return sla.cho_solve(factor, C @ P, check_finite=False).T


def propagate_covariance(Sigma, A, C, W, V) -> np.ndarray:
    """EKF covariance prediction followed by the measurement update."""
    P = A @ Sigma @ A.T + W
    K = _kalman_gain(P, C, V)
    n = P.shape[0]
    return symmetrize((_eye(n) - K @ C) @ P)


def joint_jacobian(model: ModelSpec, mu_x, a, mu_theta) -> np.ndarray:
    """Jacobian of the joint deterministic transition [f(x, a, theta); theta]."""
    d = model.dims
    fx, ft, _ = model.jacobians(mu_x, a, mu_theta)
    A = np.zeros((d.n, d.n))
    A[: d.n_x, : d.n_x] = fx
    A[: d.n_x, d.n_x:] = ft
    A[d.n_x:, d.n_x:] = _eye(d.n_theta)
    return A


def belief_step_arrays(mean, cov, a, model: ModelSpec, W=None, return_gain_map=False):
    """Array-level belief transition used inside the planner.

    Returns (mean', cov') and, on request, M = (I - K C) A, which maps
    covariance perturbations to first order: d cov' = M d cov M^T.
    """
    d = model.dims
    a = np.asarray(a, dtype=float).reshape(-1)
    mu_x, mu_t = mean[: d.n_x], mean[d.n_x:]
    A = joint_jacobian(model, mu_x, a, mu_t)
    W = model.W_joint if W is None else W
    C = model.C_joint
    P = A @ cov @ A.T + W
    K = _kalman_gain(P, C, model.V)
    IKC = _eye(d.n) - K @ C
    new_cov = symmetrize(IKC @ P)
    new_mean = np.concatenate([model.step(mu_x, a, mu_t), mu_t])
    if not (np.all(np.isfinite(new_mean)) and np.all(np.isfinite(new_cov))):
        raise ModelError("non-finite belief transition")
    if return_gain_map:
        return new_mean, new_cov, IKC @ A
    return new_mean, new_cov


def belief_step(b: GaussianBelief, a, model: ModelSpec, W=None) -> GaussianBelief:
    """Propagate the mean through f and the covariance through an EKF that assumes
    the observation equals its prediction (zero innovation)."""
    mean, cov = belief_step_arrays(b.mean, b.cov, a, model, W)
    return GaussianBelief(mean, cov)


def belief_step_coords(coords, a, model: ModelSpec, W=None) -> np.ndarray:
    """belief_step on flattened coordinates; input covariance is symmetrized, not PSD-checked."""
    n = model.dims.n
    coords = np.asarray(coords, dtype=float)
    cov = symmetrize(coords[n:].reshape((n, n), order="F"))
    mean, new_cov = belief_step_arrays(coords[:n], cov, a, model, W)
    return np.concatenate([mean, new_cov.reshape(-1, order="F")])


def _transpose_permutation(n):
    # position of entry (j, i) for each column-major index of (i, j)
    idx = np.arange(n * n).reshape((n, n), order="F")
    return idx.T.reshape(-1, order="F")


def linearize_belief_dynamics(b_bar, a_bar, model: ModelSpec, *, W=None, method: str = "analytic",
                              rel_step: float = 1e-6, zero_param_mean_block: bool = False,
                              printed_B_tilde: bool = False) -> BeliefJacobians:
    """Jacobians of the flattened belief transition at (b_bar, a_bar).

    ``method="fd"`` takes central differences of the whole transition over every
    belief and action coordinate. ``method="analytic"`` uses the first-order
    covariance identities

        d cov' = (I - K C)(dA cov A^T + A cov dA^T)(I - K C)^T
        d cov' = M d cov M^T,   M = (I - K C) A

    and only differences the joint dynamics Jacobian A.
    """
    if method not in ("fd", "analytic"):
        raise ValueError(f"unknown linearization method {method!r}")
    d = model.dims
    n, nb = d.n, d.n_belief
    coords = flatten(b_bar) if isinstance(b_bar, GaussianBelief) else np.asarray(b_bar, dtype=float)
    a_bar = np.asarray(a_bar, dtype=float).reshape(-1)
    if method == "fd":
        A_t, B_t = _fd_belief_jacobians(coords, a_bar, model, W, rel_step)
    else:
        A_t, B_t = _analytic_belief_jacobians(coords, a_bar, model, W, rel_step)
    # parameter mean is carried over unchanged
    A_t[d.n_x:n, :] = 0.0
    A_t[d.n_x:n, d.n_x:n] = np.eye(d.n_theta)
    B_t[d.n_x:n, :] = 0.0
    if zero_param_mean_block:
        A_t[: d.n_x, d.n_x:n] = 0.0
    if printed_B_tilde:
        B_t[n:, :] = 0.0
    if not (np.all(np.isfinite(A_t)) and np.all(np.isfinite(B_t))):
        raise ModelError("non-finite belief Jacobian")
    return BeliefJacobians(A_t, B_t)


def _fd_belief_jacobians(coords, a_bar, model, W, rel_step):
    nb = coords.size
    n_a = a_bar.size
    A_t = np.zeros((nb, nb))
    B_t = np.zeros((nb, n_a))
    hs = rel_step * np.maximum(1.0, np.abs(coords))
    for i in range(nb):
        zp, zm = coords.copy(), coords.copy()
        zp[i] += hs[i]
        zm[i] -= hs[i]
        A_t[:, i] = (belief_step_coords(zp, a_bar, model, W)
                     - belief_step_coords(zm, a_bar, model, W)) / (2 * hs[i])
    ha = rel_step * np.maximum(1.0, np.abs(a_bar))
    for j in range(n_a):
        ap, am = a_bar.copy(), a_bar.copy()
        ap[j] += ha[j]
        am[j] -= ha[j]
        B_t[:, j] = (belief_step_coords(coords, ap, model, W)
                     - belief_step_coords(coords, am, model, W)) / (2 * ha[j])
    return A_t, B_t


def _analytic_belief_jacobians(coords, a_bar, model, W, rel_step):
    d = model.dims
    n, nb, n_x, n_a = d.n, d.n_belief, d.n_x, d.n_a
    mean = coords[:n]
    cov = symmetrize(coords[n:].reshape((n, n), order="F"))
    W = model.W_joint if W is None else W
    mu_x, mu_t = mean[:n_x], mean[n_x:]
    fx, ft, fa = model.jacobians(mu_x, a_bar, mu_t)
    A = joint_jacobian(model, mu_x, a_bar, mu_t)
    P = A @ cov @ A.T + W
    K = _kalman_gain(P, model.C_joint, model.V)
    IKC = _eye(n) - K @ model.C_joint
    M = IKC @ A

    # dA along each mean coordinate, then each action coordinate
    z = np.concatenate([mean, a_bar])
    hs = rel_step * np.maximum(1.0, np.abs(z))
    dA = np.empty((n + n_a, n, n))
    for i in range(n + n_a):
        zp, zm = z.copy(), z.copy()
        zp[i] += hs[i]
        zm[i] -= hs[i]
        Ap = joint_jacobian(model, zp[:n_x], zp[n:], zp[n_x:n])
        Am = joint_jacobian(model, zm[:n_x], zm[n:], zm[n_x:n])
        dA[i] = (Ap - Am) / (2 * hs[i])
    SA = cov @ A.T
    dP = dA @ SA
    dP = dP + np.transpose(dP, (0, 2, 1))
    dS = IKC @ dP @ IKC.T
    # column-major flatten of each dS[i]
    dS_cols = np.transpose(dS, (0, 2, 1)).reshape(n + n_a, n * n).T

    A_t = np.zeros((nb, nb))
    A_t[:n_x, :n_x] = fx
    A_t[:n_x, n_x:n] = ft
    A_t[n:, :n] = dS_cols[:, :n]
    KM = np.kron(M, M)
    A_t[n:, n:] = 0.5 * (KM + KM[:, _transpose_permutation(n)])
    B_t = np.zeros((nb, n_a))
    B_t[:n_x] = fa
    B_t[n:] = dS_cols[:, n:]
    return A_t, B_t
