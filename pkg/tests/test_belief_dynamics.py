import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilqr.belief_dynamics import (InnovationError, belief_step, belief_step_coords, linearize_belief_dynamics,
                                   propagate_covariance)
from bilqr.core import GaussianBelief, flatten
from bilqr.estimation import ekf_update
from bilqr.models import make_aircraft, make_cartpole

from oracles import joseph_update, random_psd

MODELS = [("cartpole", "full"), ("cartpole", "partial"), ("aircraft", "full"), ("aircraft", "partial")]


def _model(name, obs, **kw):
    return (make_cartpole if name == "cartpole" else make_aircraft)(obs, **kw)


def _random_instance(rng):
    n = int(rng.integers(1, 7))
    n_o = int(rng.integers(1, n + 1))
    Sigma = random_psd(rng, n, rank=int(rng.integers(1, n + 1)))
    A = rng.standard_normal((n, n))
    C = rng.standard_normal((n_o, n))
    W = random_psd(rng, n, rank=int(rng.integers(1, n + 1)), scale=0.1)
    V = random_psd(rng, n_o) + 0.1 * np.eye(n_o)
    return Sigma, A, C, W, V


def test_matches_joseph_form_on_1000_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        Sigma, A, C, W, V = _random_instance(rng)
        out = propagate_covariance(Sigma, A, C, W, V)
        want = joseph_update(Sigma, A, C, W, V)
        scale = max(1.0, np.abs(want).max())
        assert np.max(np.abs(out - want)) <= 1e-9 * scale
        assert np.array_equal(out, out.T)
        assert np.linalg.eigvalsh(out)[0] >= -1e-9 * scale


@given(st.integers(0, 2 ** 32 - 1))
def test_measurement_never_adds_uncertainty(seed):
    rng = np.random.default_rng(seed)
    Sigma, A, C, W, V = _random_instance(rng)
    prior = A @ Sigma @ A.T + W
    out = propagate_covariance(Sigma, A, C, W, V)
    assert np.linalg.eigvalsh(prior - out)[0] >= -1e-9 * max(1.0, np.abs(prior).max())


def test_uninformative_observation():
    rng = np.random.default_rng(1)
    Sigma, A = random_psd(rng, 3), rng.standard_normal((3, 3))
    W = 0.1 * np.eye(3)
    out = propagate_covariance(Sigma, A, np.zeros((2, 3)), W, np.eye(2))
    np.testing.assert_allclose(out, A @ Sigma @ A.T + W, atol=1e-12)


@pytest.mark.parametrize("eps", [1e-2, 1e-4, 1e-6])
def test_perfect_observation_collapses(eps):
    I = np.eye(3)
    out = propagate_covariance(I, I, I, np.zeros((3, 3)), eps * I)
    np.testing.assert_allclose(out, eps / (1 + eps) * I, rtol=1e-9)


def test_singular_innovation_raises():
    with pytest.raises(InnovationError):
        propagate_covariance(np.zeros((2, 2)), np.eye(2), np.eye(2), np.zeros((2, 2)), np.diag([1.0, 1e-14]))


def test_deterministic_limit_aircraft():
    m = make_aircraft("full", W_x=0.0)
    rng = np.random.default_rng(0)
    mu = np.concatenate([rng.standard_normal(4), m.theta_true])
    b = GaussianBelief(mu, np.zeros((12, 12)))
    a = np.array([0.3, -0.2])
    nb = belief_step(b, a, m)
    np.testing.assert_allclose(nb.mean[:4], m.params.phi1 @ mu[:4] + m.params.phi2 @ a, atol=1e-14)
    np.testing.assert_allclose(nb.cov, 0.0, atol=1e-15)


@pytest.mark.parametrize("name,obs", MODELS)
def test_param_mean_unchanged(name, obs):
    m = _model(name, obs)
    rng = np.random.default_rng(2)
    for _ in range(5):
        b = _random_belief(m, rng)
        a = rng.uniform(m.a_min, m.a_max) * 3
        nb = belief_step(b, a, m)
        assert np.array_equal(nb.mean[m.dims.n_x:], b.mean[m.dims.n_x:])


def _random_belief(m, rng, scale=0.1):
    n = m.dims.n
    mu = np.concatenate([rng.standard_normal(m.dims.n_x), m.theta_true + 0.2 * rng.standard_normal(m.dims.n_theta)])
    return GaussianBelief(mu, random_psd(rng, n, scale=scale / n))


@pytest.mark.parametrize("name,obs", MODELS)
def test_matches_ekf_with_predicted_observation(name, obs):
    m = _model(name, obs)
    rng = np.random.default_rng(3)
    for _ in range(5):
        b = _random_belief(m, rng)
        a = rng.uniform(m.a_min, m.a_max)
        mu_x, mu_t = b.mean[: m.dims.n_x], b.mean[m.dims.n_x:]
        o = m.observe(m.step(mu_x, a, mu_t), a)
        nb, ne = belief_step(b, a, m), ekf_update(b, a, o, m)
        np.testing.assert_allclose(nb.mean, ne.mean, atol=1e-9)
        np.testing.assert_allclose(nb.cov, ne.cov, atol=1e-9)


def test_belief_step_is_deterministic():
    m = make_cartpole("partial")
    b = _random_belief(m, np.random.default_rng(4))
    one, two = belief_step(b, [1.0], m), belief_step(b, [1.0], m)
    assert np.array_equal(flatten(one), flatten(two))


@pytest.mark.parametrize("name,obs", MODELS)
def test_jacobian_structure(name, obs):
    m = _model(name, obs)
    rng = np.random.default_rng(5)
    b = _random_belief(m, rng)
    a = rng.uniform(m.a_min, m.a_max)
    for method in ("analytic", "fd"):
        J = linearize_belief_dynamics(b, a, m, method=method)
        n_x, n = m.dims.n_x, m.dims.n
        want = np.zeros((n - n_x, J.A_tilde.shape[1]))
        want[:, n_x:n] = np.eye(n - n_x)
        assert np.array_equal(J.A_tilde[n_x:n], want)
        assert np.array_equal(J.B_tilde[n_x:n], np.zeros((n - n_x, m.dims.n_a)))
        fx, ft, fa = m.jacobians(b.mean[:n_x], a, b.mean[n_x:])
        np.testing.assert_allclose(J.A_tilde[:n_x, :n_x], fx, atol=1e-5)
        np.testing.assert_allclose(J.A_tilde[:n_x, n_x:n], ft, atol=1e-5)
        np.testing.assert_allclose(J.B_tilde[:n_x], fa, atol=1e-5)


def test_aircraft_mean_block_is_phi1():
    m = make_aircraft("full")
    b = _random_belief(m, np.random.default_rng(6))
    J = linearize_belief_dynamics(b, [0.1, 0.2], m, method="fd")
    np.testing.assert_allclose(J.A_tilde[:4, :4], m.params.matrices(b.mean[4:])[0], atol=1e-8)


@pytest.mark.parametrize("name,obs", MODELS)
def test_analytic_matches_fd(name, obs):
    m = _model(name, obs)
    rng = np.random.default_rng(8)
    b = _random_belief(m, rng)
    a = rng.uniform(m.a_min, m.a_max)
    J1 = linearize_belief_dynamics(b, a, m, method="fd")
    J2 = linearize_belief_dynamics(b, a, m, method="analytic")
    scale = np.abs(J1.A_tilde).max()
    np.testing.assert_allclose(J2.A_tilde, J1.A_tilde, atol=1e-6 * scale)
    np.testing.assert_allclose(J2.B_tilde, J1.B_tilde, atol=1e-6 * max(1.0, np.abs(J1.B_tilde).max()))


@pytest.mark.parametrize("name", ["cartpole", "aircraft"])
def test_fd_step_halving(name):
    m = _model(name, "partial")
    rng = np.random.default_rng(9)
    b = _random_belief(m, rng)
    a = rng.uniform(m.a_min, m.a_max)
    J6 = linearize_belief_dynamics(b, a, m, method="fd", rel_step=1e-6)
    J7 = linearize_belief_dynamics(b, a, m, method="fd", rel_step=1e-7)
    for X, Y in ((J6.A_tilde, J7.A_tilde), (J6.B_tilde, J7.B_tilde)):
        assert np.max(np.abs(X - Y)) <= 1e-4 * max(1.0, np.abs(Y).max())


def _first_order_errors(m, b, a, J, direction, scales):
    z, errs = flatten(b), []
    F0 = belief_step_coords(z, a, m)
    db_dir, da_dir = direction
    for s in scales:
        db, da = s * db_dir, s * da_dir
        F1 = belief_step_coords(z + db, a + da, m)
        errs.append(np.linalg.norm(F1 - F0 - J.A_tilde @ db - J.B_tilde @ da))
    return errs


def _symmetric_direction(m, rng):
    n = m.dims.n
    E = rng.standard_normal((n, n))
    cov_dir = 0.5 * (E + E.T)
    db = np.concatenate([rng.standard_normal(n), cov_dir.reshape(-1, order="F")])
    da = rng.standard_normal(m.dims.n_a)
    norm = np.linalg.norm(np.concatenate([db, da]))
    return db / norm, da / norm


@pytest.mark.parametrize("name,obs", MODELS)
def test_first_order_error_shrinks_fourfold(name, obs):
    """Halving the perturbation cuts the linearization residual by about four."""
    m = _model(name, obs)
    rng = np.random.default_rng(10)
    for _ in range(10):
        b = _random_belief(m, rng)
        a = rng.uniform(m.a_min, m.a_max)
        J = linearize_belief_dynamics(b, a, m)
        direction = _symmetric_direction(m, rng)
        e1, e2 = _first_order_errors(m, b, a, J, direction, (1e-4, 5e-5))
        assert 3.5 < e1 / e2 < 4.5, (e1, e2)


def test_printed_form_switches():
    m = make_cartpole("partial")
    b = _random_belief(m, np.random.default_rng(11))
    J = linearize_belief_dynamics(b, [2.0], m, zero_param_mean_block=True, printed_B_tilde=True)
    assert np.all(J.A_tilde[:4, 4:5] == 0)
    assert np.all(J.B_tilde[5:] == 0)
    full = linearize_belief_dynamics(b, [2.0], m)
    assert np.any(full.B_tilde[5:] != 0)
