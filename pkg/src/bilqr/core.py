"""Gaussian belief primitives over the joint [state, parameter] vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYM_TOL = 1e-10
PSD_TOL = 1e-9
ROUNDOFF_TOL = 1e-13


class BeliefError(ValueError):
    """Raised for malformed beliefs (bad shapes, asymmetric or indefinite covariance)."""


class DimensionError(BeliefError):
    pass


@dataclass(frozen=True)
class ProblemDims:
    n_x: int
    n_theta: int
    n_a: int
    n_o: int

    def __post_init__(self):
        for name in ("n_x", "n_theta", "n_a", "n_o"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def n(self) -> int:
        """Joint dimension n_x + n_theta."""
        return self.n_x + self.n_theta

    @property
    def n_belief(self) -> int:
        return self.n + self.n * self.n


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def repair_psd(cov: np.ndarray) -> np.ndarray:
    """Clamp round-off negative eigenvalues to zero.

    Eigenvalues in (-PSD_TOL, 0) are treated as round-off and clamped; anything
    more negative means an upstream bug and raises BeliefError.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    if cov.size == 0:
        return cov
    w = np.linalg.eigvalsh(cov)
    scale = max(1.0, abs(w[-1]))
    # eigvalsh itself is only accurate to ~n*eps*scale; leave such values alone
    if w[0] >= -ROUNDOFF_TOL * scale:
        return cov
    if w[0] < -PSD_TOL * scale:
        raise BeliefError(f"covariance is indefinite (min eigenvalue {w[0]:.3e})")
    w, v = np.linalg.eigh(cov)
    return symmetrize((v * np.clip(w, 0.0, None)) @ v.T)


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Joint Gaussian belief; ``mean`` stacks the state above the parameters.

    Construction re-symmetrizes ``cov`` and clamps round-off negative
    eigenvalues. Arrays are made read-only so instances can be shared freely.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"cov shape {cov.shape} does not match mean length {mean.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise BeliefError("belief contains non-finite values")
        cov = repair_psd(cov)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def state_mean(self, dims: ProblemDims) -> np.ndarray:
        return self.mean[: dims.n_x]

    def param_mean(self, dims: ProblemDims) -> np.ndarray:
        return self.mean[dims.n_x:]

    @classmethod
    def from_blocks(cls, mu_x, mu_theta, cov_xx, cov_tt, cov_xt=None) -> "GaussianBelief":
        mu_x = np.atleast_1d(np.asarray(mu_x, dtype=float))
        mu_theta = np.atleast_1d(np.asarray(mu_theta, dtype=float))
        nx, nt = mu_x.size, mu_theta.size
        cov = np.zeros((nx + nt, nx + nt))
        cov[:nx, :nx] = np.atleast_2d(cov_xx)
        cov[nx:, nx:] = np.atleast_2d(cov_tt)
        if cov_xt is not None:
            cov[:nx, nx:] = cov_xt
            cov[nx:, :nx] = np.asarray(cov_xt).T
        return cls(np.concatenate([mu_x, mu_theta]), cov)


def flatten(belief: GaussianBelief) -> np.ndarray:
    """Belief coordinates: mean followed by the column-stacked covariance."""
    return np.concatenate([belief.mean, belief.cov.reshape(-1, order="F")])


def unflatten(coords, dims: ProblemDims | int) -> GaussianBelief:
    coords = np.asarray(coords, dtype=float).reshape(-1)
    n = dims if isinstance(dims, int) else dims.n
    if coords.size != n + n * n:
        raise DimensionError(
            f"belief vector has length {coords.size}, expected {n + n * n} for n={n}")
    cov = coords[n:].reshape((n, n), order="F")
    return GaussianBelief(coords[:n].copy(), symmetrize(cov))


def marginal_param_cov(belief: GaussianBelief, dims: ProblemDims) -> np.ndarray:
    return belief.cov[dims.n_x:, dims.n_x:].copy()


def param_cov_indices(dims: ProblemDims) -> np.ndarray:
    """Indices into the belief vector of the column-stacked parameter covariance block."""
    n = dims.n
    idx = [n + (dims.n_x + i) + n * (dims.n_x + j)
           for j in range(dims.n_theta) for i in range(dims.n_theta)]
    return np.array(idx, dtype=int)
