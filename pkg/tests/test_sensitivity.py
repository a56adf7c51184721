from __future__ import annotations

import numpy as np
import pytest

from legcalib import blocktri
from legcalib.datagen import GaitScript, make_dataset
from legcalib.estimator import (EstimationProblem, LinearGaussianProblem, assemble,
                                kkt_residual, solve_fie)
from legcalib.sensitivity import (SparseKktSystem, assemble_kkt_jacobian, assemble_rhs,
                                  exact_hessian, sensitivity, solve_sensitivity)

from test_estimator import closed_form


def test_linear_one_step_hessian_closed_form():
    s0, sr = 0.3, 0.7
    prob = LinearGaussianProblem([1.0, 2.0], [[0.0, 1.0]], [s0, 1.0, sr])
    X = solve_fie(prob).trajectory
    for mode in ("gn", "exact"):
        H = assemble_kkt_jacobian(X, prob, hessian=mode).to_dense()
        # cost carries no 1/2, so the Hessian is twice the information matrix
        np.testing.assert_allclose(H, 2 * (1 / s0 ** 2 + 1 / sr ** 2) * np.eye(2), rtol=1e-6)


def test_linear_one_step_sensitivity_closed_form():
    mu, y = np.array([1.0, -2.0]), np.array([[0.5, 1.0]])
    s0, sr = 0.3, 0.7
    prob = LinearGaussianProblem(mu, y, [s0, 1.0, sr])
    X = solve_fie(prob).trajectory
    Z, _ = sensitivity(X, prob, hessian="gn")
    P, R = s0 ** 2, sr ** 2
    # x = (R mu + P y) / (P + R)
    dx_dP = R * (y[0] - mu) / (P + R) ** 2
    dx_dR = P * (mu - y[0]) / (P + R) ** 2
    np.testing.assert_allclose(Z[0, :, 0], dx_dP * 2 * s0, atol=1e-10)
    np.testing.assert_allclose(Z[0, :, 1], 0.0, atol=1e-14)
    np.testing.assert_allclose(Z[0, :, 2], dx_dR * 2 * sr, atol=1e-10)


def test_linear_multi_step_sensitivity_vs_closed_form_fd():
    rng = np.random.default_rng(0)
    mu, y = rng.normal(size=2), rng.normal(size=(6, 2))
    theta = np.array([0.5, 0.2, 0.3])
    prob = LinearGaussianProblem(mu, y, theta)
    X = solve_fie(prob).trajectory
    Z, _ = sensitivity(X, prob, hessian="gn")
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (closed_form(mu, y, *(theta + e)) - closed_form(mu, y, *(theta - e))) / (2 * h)
        np.testing.assert_allclose(Z[..., j], fd, atol=1e-7)


def test_zero_rhs_gives_zero_sensitivity(noisy_problem):
    prob, X = noisy_problem
    H = assemble_kkt_jacobian(X, prob, hessian="gn")
    Z = solve_sensitivity(SparseKktSystem(H, np.zeros((prob.n_states, prob.dim, 4))))
    assert np.all(Z == 0.0)


@pytest.fixture(scope="module")
def noisy_problem(robot, short_dataset, truth_params):
    lg, tb = short_dataset
    prob = EstimationProblem(robot, lg, truth_params, tb.trajectory.state(0))
    return prob, solve_fie(prob).trajectory


@pytest.fixture(scope="module")
def tiny_problem(robot, truth_params):
    lg, tb = make_dataset(robot, GaitScript(duration=0.05), truth_params, seed=2)
    prob = EstimationProblem(robot, lg, truth_params, tb.trajectory.state(0))
    return prob, solve_fie(prob).trajectory


def test_base_offset_columns_are_zero(noisy_problem):
    prob, X = noisy_problem
    B = assemble_rhs(X, prob)
    assert np.all(B[..., prob.params.layout.slices["theta_base"]] == 0.0)


def test_rhs_matches_fd_of_gradient(noisy_problem):
    prob, X = noisy_problem
    B = assemble_rhs(X, prob)
    lay = prob.params.layout
    sl = lay.slices
    cols = list(range(sl["theta_foot"].start, sl["theta_foot"].stop))
    cols += [sl[name].start for name in ("Q_a", "Q_w", "Q_foot", "R_alpha", "R_alphadot",
                                         "Q_ba", "P0")]
    for j in cols:
        h = 1e-6 * max(1.0, abs(prob.params.theta[j]))
        th = prob.params.theta.copy()
        th[j] += h
        Fp, _ = kkt_residual(X, prob.with_params(prob.params.with_theta(th)))
        th[j] -= 2 * h
        Fm, _ = kkt_residual(X, prob.with_params(prob.params.with_theta(th)))
        fd = -(Fp - Fm) / (2 * h)
        err = np.max(np.abs(B[..., j] - fd)) / max(np.max(np.abs(fd)), 1e-300)
        assert err <= 1e-5, (lay.names()[j], err)


def test_covariance_column_sign_follows_inverse_derivative():
    """Raising the measurement std pulls the estimate towards the prior."""
    prob = LinearGaussianProblem([0.0], [[1.0]], [1.0, 1.0, 1.0])
    X = solve_fie(prob).trajectory
    B = assemble_rhs(X, prob)
    assert B[0, 0, 2] < 0 < B[0, 0, 0]


def test_exact_hessian_matches_dense_fd(tiny_problem):
    prob, X = tiny_problem
    N, D = prob.n_states, prob.dim
    H = exact_hessian(X, prob).to_dense()
    G = assemble(prob.linearize(X), N, D)[2].to_dense()
    h = 1e-5
    n = N * D
    rng = np.random.default_rng(3)
    cols = rng.choice(n, 40, replace=False)

    def cost(tau):
        return prob.cost(prob.retract(X, tau.reshape(N, D)))

    c0 = cost(np.zeros(n))
    worst = 0.0
    for i in cols:
        for j in rng.choice(n, 5, replace=False):
            ei, ej = np.zeros(n), np.zeros(n)
            ei[i], ej[j] = h, h
            fd = (cost(ei + ej) - cost(ei - ej) - cost(ej - ei) + cost(-ei - ej)) / (4 * h * h)
            worst = max(worst, abs(H[i, j] - fd) / max(np.max(np.abs(H)), 1.0))
    gap = np.max(np.abs(H - G)) / np.max(np.abs(H))
    print(f"exact-vs-FD {worst:.2e}, GN-vs-exact {gap:.2e} (cost {c0:.3e})")
    assert worst <= 1e-4


def test_hessian_symmetric_and_banded(noisy_problem):
    prob, X = noisy_problem
    H = assemble_kkt_jacobian(X, prob).to_dense()
    assert np.max(np.abs(H - H.T)) == 0.0
    n, D = prob.n_states, prob.dim
    far = np.kron(np.abs(np.subtract.outer(np.arange(n), np.arange(n))) > 1,
                  np.ones((D, D), dtype=bool))
    assert np.all(H[far] == 0.0)


def test_single_factorization_per_call(noisy_problem):
    prob, X = noisy_problem
    before = blocktri.stats["factorizations"]
    Z, system = sensitivity(X, prob)
    assert blocktri.stats["factorizations"] - before == 1
    assert system.damping == 0.0
    assert np.all(np.isfinite(Z))


@pytest.mark.parametrize("name", ["theta_foot", "Q_a", "R_alpha"])
def test_sensitivity_vs_resolve_fd(noisy_problem, name):
    prob, X = noisy_problem
    Z, _ = sensitivity(X, prob)
    j = prob.params.layout.slices[name].start
    eps = 1e-5
    sols = []
    for sgn in (1, -1):
        th = prob.params.theta.copy()
        th[j] += sgn * eps
        res = solve_fie(prob.with_params(prob.params.with_theta(th)), X)
        assert res.converged
        sols.append(res.trajectory)
    from legcalib.manifold import boxminus

    fd = np.array([boxminus(sols[0].state(k), sols[1].state(k))
                   for k in range(len(X))]) / (2 * eps)
    err = np.max(np.abs(Z[..., j] - fd) / (1 + np.abs(fd)))
    assert err <= 1e-3
