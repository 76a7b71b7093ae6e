"""Plant models: cart-pole with unknown log pole mass, linear longitudinal aircraft
with unknown first columns of its transition and input matrices.

Both models share the ModelSpec interface consumed by the belief dynamics,
the estimators and the simulator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import ProblemDims

FULL = "full"
PARTIAL = "partial"
OBSERVABILITY = (FULL, PARTIAL)
DEFAULT_FULL_OBS_EPS = 1e-6


class ModelError(ArithmeticError):
    """Non-finite dynamics output or Jacobian."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"non-finite {what}")
    return arr


# ---------------------------------------------------------------------------
# cart-pole

@dataclass(frozen=True)
class CartPoleParams:
    m_c: float = 1.0
    L: float = 1.0
    g_grav: float = 9.81
    dt: float = 0.1
    theta_true: float = math.log(2.0)

    def __post_init__(self):
        for name in ("m_c", "L", "g_grav", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cart-pole {name} must be positive")


def cartpole_derivative(x, a, theta, params: CartPoleParams = CartPoleParams()) -> np.ndarray:
    """Time derivative of [p, psi, p_dot, psi_dot] under force ``a`` and log pole mass ``theta``."""
    _, psi, p_dot, psi_dot = (float(v) for v in np.asarray(x, dtype=float).reshape(-1))
    a = float(np.asarray(a, dtype=float).reshape(-1)[0])
    m_c, L, g = params.m_c, params.L, params.g_grav
    s, c = math.sin(psi), math.cos(psi)
    try:
        m_p = math.exp(float(np.asarray(theta, dtype=float).reshape(-1)[0]))
        h = m_c + m_p * s * s
        p_ddot = (m_p * s * (L * psi_dot ** 2 + g * c) + a) / h
        psi_ddot = -((m_c + m_p) * g * s + m_p * L * psi_dot ** 2 * s * c + a * c) / (h * L)
    except OverflowError as exc:
        raise ModelError("cart-pole derivative overflow") from exc
    if not (math.isfinite(p_ddot) and math.isfinite(psi_ddot)):
        raise ModelError("non-finite cart-pole derivative")
    return np.array([p_dot, psi_dot, p_ddot, psi_ddot])


def cartpole_step_jacobians(x, a, theta, dt=None, params: CartPoleParams = CartPoleParams()):
    """Closed-form (df/dx, df/dtheta, df/da) of the Euler step."""
    dt = params.dt if dt is None else dt
    try:
        jacs = _cartpole_jacobians(x, a, theta, dt, params)
    except OverflowError as exc:
        raise ModelError("cart-pole Jacobian overflow") from exc
    if not all(np.all(np.isfinite(j)) for j in jacs):
        raise ModelError("non-finite cart-pole Jacobian")
    return jacs


def _cartpole_jacobians(x, a, theta, dt, params):
    _, psi, _, w = (float(v) for v in np.asarray(x, dtype=float).reshape(-1))
    a = float(np.asarray(a, dtype=float).reshape(-1)[0])
    m = math.exp(float(np.asarray(theta, dtype=float).reshape(-1)[0]))
    M, L, g = params.m_c, params.L, params.g_grav
    s, c = math.sin(psi), math.cos(psi)
    h = M + m * s * s
    h_psi, h_m = 2 * m * s * c, s * s
    n1 = m * s * (L * w * w + g * c) + a
    n1_psi = m * (c * L * w * w + g * (c * c - s * s))
    n1_w, n1_m = 2 * m * s * L * w, s * (L * w * w + g * c)
    n2 = (M + m) * g * s + m * L * w * w * s * c + a * c
    n2_psi = (M + m) * g * c + m * L * w * w * (c * c - s * s) - a * s
    n2_w, n2_m = 2 * m * L * w * s * c, g * s + L * w * w * s * c
    h2 = h * h
    pdd_psi = (n1_psi * h - n1 * h_psi) / h2
    pdd_w = n1_w / h
    pdd_m = (n1_m * h - n1 * h_m) / h2
    qdd_psi = -(n2_psi * h - n2 * h_psi) / (h2 * L)
    qdd_w = -n2_w / (h * L)
    qdd_m = -(n2_m * h - n2 * h_m) / (h2 * L)
    fx = np.eye(4)
    fx[0, 2] = fx[1, 3] = dt
    fx[2, 1], fx[2, 3] = dt * pdd_psi, dt * pdd_w
    fx[3, 1], fx[3, 3] = dt * qdd_psi, 1.0 + dt * qdd_w
    ft = np.array([[0.0], [0.0], [dt * m * pdd_m], [dt * m * qdd_m]])
    fa = np.array([[0.0], [0.0], [dt / h], [-dt * c / (h * L)]])
    return fx, ft, fa


def cartpole_step(x, a, theta, dt=None, params: CartPoleParams = CartPoleParams()) -> np.ndarray:
    """One explicit Euler step."""
    dt = params.dt if dt is None else dt
    x = np.asarray(x, dtype=float).reshape(-1)
    if dt == 0:
        return x.copy()
    return x + dt * cartpole_derivative(x, a, theta, params)


# ---------------------------------------------------------------------------
# aircraft

# states [u, w, alpha, alpha_dot]; actions [elevator, throttle]
_AIRCRAFT_A_CONT = np.array([
    [-0.045, 0.036, -0.5, 0.0],
    [-0.37, -2.02, 0.0, 1.0],
    [0.0, 0.0, 0.0, 1.0],
    [0.002, -0.04, -5.0, -2.9],
])
_AIRCRAFT_B_CONT = np.array([
    [0.0, 5.0],
    [-2.0, 0.0],
    [0.0, 0.0],
    [-10.0, 0.0],
])


def _default_phi1():
    return np.eye(4) + 0.1 * _AIRCRAFT_A_CONT


def _default_phi2():
    return 0.1 * _AIRCRAFT_B_CONT


def _first_column_mask():
    m1 = np.zeros((4, 4), dtype=bool)
    m2 = np.zeros((4, 2), dtype=bool)
    m1[:, 0] = True
    m2[:, 0] = True
    return m1, m2


@dataclass(frozen=True, eq=False)
class AircraftParams:
    """Discrete longitudinal model x' = phi1 x + phi2 a.

    ``theta`` overwrites the masked entries, Phi1's first, then Phi2's, each in
    column-major order. The nominal matrices also supply the true parameters.
    """

    phi1: np.ndarray = field(default_factory=_default_phi1)
    phi2: np.ndarray = field(default_factory=_default_phi2)
    mask1: np.ndarray = field(default_factory=lambda: _first_column_mask()[0])
    mask2: np.ndarray = field(default_factory=lambda: _first_column_mask()[1])

    def __post_init__(self):
        phi1 = np.array(self.phi1, dtype=float)
        phi2 = np.array(self.phi2, dtype=float)
        m1 = np.array(self.mask1, dtype=bool)
        m2 = np.array(self.mask2, dtype=bool)
        if phi1.shape != (4, 4) or phi2.shape != (4, 2):
            raise ValueError("aircraft phi1 must be 4x4 and phi2 4x2")
        if m1.shape != phi1.shape or m2.shape != phi2.shape:
            raise ValueError("aircraft masks must match matrix shapes")
        if m1.sum() + m2.sum() != 8:
            raise ValueError("aircraft mask must select exactly 8 entries")
        if np.max(np.abs(np.linalg.eigvals(phi1))) >= 1.2:
            raise ValueError("aircraft phi1 spectral radius must be below 1.2")
        for name, v in (("phi1", phi1), ("phi2", phi2), ("mask1", m1), ("mask2", m2)):
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    @property
    def theta_true(self) -> np.ndarray:
        return np.concatenate([self.phi1.T[self.mask1.T], self.phi2.T[self.mask2.T]])

    def matrices(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != 8:
            raise ValueError(f"aircraft theta must have length 8, got {theta.size}")
        k = int(self.mask1.sum())
        p1 = self.phi1.copy()
        p2 = self.phi2.copy()
        # fill column-major: transpose, boolean-assign, transpose back
        p1t, p2t = p1.T.copy(), p2.T.copy()
        p1t[self.mask1.T] = theta[:k]
        p2t[self.mask2.T] = theta[k:]
        return p1t.T, p2t.T

    def theta_jacobian(self, x, a) -> np.ndarray:
        """d(phi1(theta) x + phi2(theta) a)/d theta; exact since the map is linear in theta."""
        x = np.asarray(x, dtype=float).reshape(-1)
        a = np.asarray(a, dtype=float).reshape(-1)
        cols = []
        for mask, vec in ((self.mask1, x), (self.mask2, a)):
            rows, js = np.nonzero(mask.T)
            for j, i in zip(rows, js):
                c = np.zeros(4)
                c[i] = vec[j]
                cols.append(c)
        return np.column_stack(cols)


def aircraft_step(x, a, theta, params: AircraftParams = AircraftParams()) -> np.ndarray:
    p1, p2 = params.matrices(theta)
    return p1 @ np.asarray(x, dtype=float).reshape(-1) + p2 @ np.asarray(a, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# observation

_PARTIAL_ROWS = {"cartpole": [0, 1], "aircraft": [0, 1, 2]}


def observation_matrix(model_name: str, mode: str, n_x: int) -> np.ndarray:
    """Constant 0/1 selector C_x such that g(x, a) = C_x x."""
    if mode == FULL:
        return np.eye(n_x)
    if mode != PARTIAL:
        raise ValueError(f"unknown observability {mode!r}")
    rows = _PARTIAL_ROWS[model_name]
    return np.eye(n_x)[rows]


def observe(x, a=None, mode: str = FULL, model_name: str = "cartpole") -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if mode == FULL:
        return x.copy()
    return observation_matrix(model_name, mode, x.size) @ x


# ---------------------------------------------------------------------------
# model interface

def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], z, rel_step=1e-6) -> np.ndarray:
    """Central differences with step rel_step * max(1, |z_i|)."""
    z = np.asarray(z, dtype=float).reshape(-1)
    cols = []
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2.0 * h))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable plant description.

    ``step`` is the deterministic dynamics f(x, a, theta); ``C_x`` is the linear
    observation selector (both plants observe a subset of the state).
    ``theta_true`` and ``x0`` are for the simulator only.
    """

    name: str
    dims: ProblemDims
    step: Callable
    observability: str
    C_x: np.ndarray
    W_x: np.ndarray
    W_theta: np.ndarray
    V: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    theta_true: np.ndarray
    x0: np.ndarray
    params: object = None
    analytic_jacobians: Callable | None = None
    fd_step: float = 1e-6

    def __post_init__(self):
        for name in ("C_x", "W_x", "W_theta", "V", "a_min", "a_max", "theta_true", "x0"):
            v = np.array(getattr(self, name), dtype=float)
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        d = self.dims
        if self.W_x.shape != (d.n_x, d.n_x) or self.W_theta.shape != (d.n_theta, d.n_theta):
            raise ValueError("process noise shapes do not match model dims")
        if self.V.shape != (d.n_o, d.n_o) or self.C_x.shape != (d.n_o, d.n_x):
            raise ValueError("observation shapes do not match model dims")
        for name in ("W_x", "W_theta"):
            if np.linalg.eigvalsh(getattr(self, name))[0] < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        if np.linalg.eigvalsh(self.V)[0] <= 0:
            raise ValueError("V must be positive definite")
        if not np.all(self.a_min < self.a_max):
            raise ValueError("a_min must be strictly below a_max")

    @property
    def W_joint(self) -> np.ndarray:
        n_x, n_t = self.dims.n_x, self.dims.n_theta
        w = np.zeros((n_x + n_t, n_x + n_t))
        w[:n_x, :n_x] = self.W_x
        w[n_x:, n_x:] = self.W_theta
        return w

    @property
    def C_joint(self) -> np.ndarray:
        """Observation Jacobian over [x, theta]; g does not depend on theta."""
        return np.hstack([self.C_x, np.zeros((self.dims.n_o, self.dims.n_theta))])

    def observe(self, x, a=None) -> np.ndarray:
        return self.C_x @ np.asarray(x, dtype=float).reshape(-1)

    def clamp(self, a) -> np.ndarray:
        return np.clip(np.asarray(a, dtype=float).reshape(-1), self.a_min, self.a_max)

    def jacobians(self, x, a, theta):
        """(df/dx, df/dtheta, df/da), analytic when the model provides it."""
        if self.analytic_jacobians is not None:
            return self.analytic_jacobians(x, a, theta)
        return dynamics_jacobians(x, a, theta, self)

    def with_overrides(self, **kw) -> "ModelSpec":
        return replace(self, **kw)


def dynamics_jacobians(x, a, theta, model: ModelSpec, rel_step: float | None = None):
    """Central finite-difference Jacobians (df/dx, df/dtheta, df/da)."""
    rel_step = model.fd_step if rel_step is None else rel_step
    x = np.asarray(x, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    fx = fd_jacobian(lambda z: model.step(z, a, theta), x, rel_step)
    ft = fd_jacobian(lambda z: model.step(x, a, z), theta, rel_step)
    fa = fd_jacobian(lambda z: model.step(x, z, theta), a, rel_step)
    return _check_finite(fx, "Jacobian"), _check_finite(ft, "Jacobian"), _check_finite(fa, "Jacobian")


def observation_jacobian(x, a, model: ModelSpec) -> np.ndarray:
    return model.C_x.copy()


def _noise_matrix(value, n):
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return float(v) * np.eye(n)
    if v.ndim == 1:
        return np.diag(v)
    return v


def make_cartpole(observability: str = FULL, params: CartPoleParams | None = None, *,
                  W_x=1e-4, W_theta=0.0, V=0.01, full_obs_eps=DEFAULT_FULL_OBS_EPS,
                  a_min=-10.0, a_max=10.0, x0=(0.0, math.pi - 0.1, 0.0, 0.0)) -> ModelSpec:
    params = params or CartPoleParams()
    C = observation_matrix("cartpole", observability, 4)
    n_o = C.shape[0]
    V = full_obs_eps if observability == FULL else V

    def step(x, a, theta):
        return cartpole_step(x, a, theta, params.dt, params)

    def jacobians(x, a, theta):
        return cartpole_step_jacobians(x, a, theta, params.dt, params)

    return ModelSpec(
        name="cartpole", dims=ProblemDims(4, 1, 1, n_o), step=step,
        observability=observability, C_x=C,
        W_x=_noise_matrix(W_x, 4), W_theta=_noise_matrix(W_theta, 1),
        V=_noise_matrix(V, n_o),
        a_min=np.atleast_1d(a_min), a_max=np.atleast_1d(a_max),
        theta_true=np.array([params.theta_true]), x0=np.asarray(x0, dtype=float),
        params=params, analytic_jacobians=jacobians,
    )


def make_aircraft(observability: str = FULL, params: AircraftParams | None = None, *,
                  W_x=1e-3, W_theta=0.0, V=0.1, full_obs_eps=DEFAULT_FULL_OBS_EPS,
                  a_min=(-1.0, -1.0), a_max=(1.0, 1.0), x0=(0.0, 0.0, 0.0, 0.0)) -> ModelSpec:
    params = params or AircraftParams()
    C = observation_matrix("aircraft", observability, 4)
    n_o = C.shape[0]
    V = full_obs_eps if observability == FULL else V

    def step(x, a, theta):
        return aircraft_step(x, a, theta, params)

    def jacobians(x, a, theta):
        p1, p2 = params.matrices(theta)
        return p1, params.theta_jacobian(x, a), p2

    return ModelSpec(
        name="aircraft", dims=ProblemDims(4, 8, 2, n_o), step=step,
        observability=observability, C_x=C,
        W_x=_noise_matrix(W_x, 4), W_theta=_noise_matrix(W_theta, 8),
        V=_noise_matrix(V, n_o),
        a_min=np.asarray(a_min, dtype=float), a_max=np.asarray(a_max, dtype=float),
        theta_true=params.theta_true, x0=np.asarray(x0, dtype=float),
        params=params, analytic_jacobians=jacobians,
    )


def make_model(name: str, observability: str = FULL, **kw) -> ModelSpec:
    if name == "cartpole":
        return make_cartpole(observability, **kw)
    if name == "aircraft":
        return make_aircraft(observability, **kw)
    raise ValueError(f"unknown model {name!r}")
