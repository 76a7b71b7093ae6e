"""Independent reference implementations used as test oracles.

Each one is written from textbook formulas without calling into the package.
"""
import math

import numpy as np


def random_psd(rng, n, rank=None, scale=1.0):
    G = rng.standard_normal((n, rank or n))
    return scale * G @ G.T


def joseph_update(Sigma, A, C, W, V):
    P = A @ Sigma @ A.T + W
    S = C @ P @ C.T + V
    K = P @ C.T @ np.linalg.inv(S)
    I = np.eye(P.shape[0])
    return (I - K @ C) @ P @ (I - K @ C).T + K @ V @ K.T


def kalman_correct(mu_pred, P, H, R, o):
    """Textbook measurement update with an explicit inverse and the Joseph covariance form."""
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    mu = mu_pred + K @ (o - H @ mu_pred)
    I = np.eye(P.shape[0])
    return mu, (I - K @ H) @ P @ (I - K @ H).T + K @ R @ K.T


def aircraft_joint_kf_step(mu, Sigma, a, o, phi1, phi2, Q, H, R):
    """Predict/correct on [x; theta] where theta is the first column of phi1 then of phi2.

    The transition is linearized at the mean by hand: d/dx = phi1(theta),
    d/dtheta = [x_1 I, a_1 I].
    """
    x, th = mu[:4], mu[4:]
    p1, p2 = phi1.copy(), phi2.copy()
    p1[:, 0], p2[:, 0] = th[:4], th[4:]
    F = np.zeros((12, 12))
    F[:4, :4] = p1
    F[:4, 4:8] = x[0] * np.eye(4)
    F[:4, 8:] = a[0] * np.eye(4)
    F[4:, 4:] = np.eye(8)
    mu_pred = np.concatenate([p1 @ x + p2 @ a, th])
    return kalman_correct(mu_pred, F @ Sigma @ F.T + Q, H, R, o)


def riccati_gains(A, B, Q, R, QT, T):
    """Finite-horizon LQR for reward sum x'Qx + u'Ru + x_T'QT x_T (Q, R, QT negative definite).

    Returns feedback gains K_t with u_t = K_t x_t, and the value matrices P_t with
    optimal reward-to-go x'P_t x.
    """
    P = QT
    gains, values = [None] * T, [None] * (T + 1)
    values[T] = P
    for t in reversed(range(T)):
        Huu = R + B.T @ P @ B
        Hux = B.T @ P @ A
        K = -np.linalg.solve(Huu, Hux)
        P = Q + A.T @ P @ A + Hux.T @ K
        P = 0.5 * (P + P.T)
        gains[t], values[t] = K, P
    return gains, values


def cartpole_rhs(x, a, m_p, m_c=1.0, L=1.0, g=9.81):
    """Cart-pole derivative typed in directly from the displayed equations."""
    p, psi, pd, psid = x
    h = m_c + m_p * math.sin(psi) ** 2
    pdd = (m_p * math.sin(psi) * (L * psid ** 2 + g * math.cos(psi)) + a) / h
    psidd = -((m_c + m_p) * g * math.sin(psi) + m_p * L * psid ** 2 * math.sin(psi) * math.cos(psi)
              + a * math.cos(psi)) / (h * L)
    return np.array([pd, psid, pdd, psidd])


def mvn_logpdf(x, mu, cov):
    d = len(x)
    diff = np.asarray(x, float) - np.asarray(mu, float)
    sign, logdet = np.linalg.slogdet(cov)
    return -0.5 * (d * math.log(2 * math.pi) + logdet + diff @ np.linalg.solve(cov, diff))


def mean_and_se(values):
    """Spreadsheet-style statistics: AVERAGE and STDEV.S/SQRT(COUNT)."""
    n = len(values)
    m = sum(values) / n
    var = sum((v - m) ** 2 for v in values) / (n - 1)
    return m, math.sqrt(var) / math.sqrt(n)
