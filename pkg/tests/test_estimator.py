from __future__ import annotations

import numpy as np
import pytest

from legcalib.datagen import GaitScript, make_dataset, true_params
from legcalib.estimator import (EstimationProblem, LinearGaussianProblem, assemble,
                                build_residuals, kkt_residual, prior_from_mocap, solve_fie)
from legcalib.manifold import boxminus


def closed_form(mu, y, s0, sq, sr):
    """Dense weighted least squares for the random-walk oracle."""
    N, d = y.shape
    rows, rhs, w = [], [], []
    for k in range(N):
        e = np.zeros((d, N * d))
        e[:, k * d:(k + 1) * d] = np.eye(d)
        rows.append(e), rhs.append(y[k]), w.append(np.full(d, 1 / sr ** 2))
        if k > 0:
            f = np.zeros((d, N * d))
            f[:, k * d:(k + 1) * d] = np.eye(d)
            f[:, (k - 1) * d:k * d] = -np.eye(d)
            rows.append(f), rhs.append(np.zeros(d)), w.append(np.full(d, 1 / sq ** 2))
    e = np.zeros((d, N * d))
    e[:, :d] = np.eye(d)
    rows.append(e), rhs.append(mu), w.append(np.full(d, 1 / s0 ** 2))
    A, b, W = np.vstack(rows), np.concatenate(rhs), np.concatenate(w)
    return np.linalg.solve(A.T @ (W[:, None] * A), A.T @ (W * b)).reshape(N, d)


def test_linear_one_step_matches_fusion():
    mu, y = np.array([1.0, -2.0, 0.5]), np.array([[1.4, -1.0, 0.0]])
    s0, sr = 0.3, 0.7
    prob = LinearGaussianProblem(mu, y, [s0, 1.0, sr])
    res = solve_fie(prob)
    P, R = s0 ** 2, sr ** 2
    expect = (mu / P + y[0] / R) / (1 / P + 1 / R)
    np.testing.assert_allclose(res.trajectory[0], expect, atol=1e-10)
    assert res.converged
    assert kkt_residual(expect[None], prob)[1] <= 1e-12


def test_linear_multi_step_matches_dense_solve():
    rng = np.random.default_rng(0)
    mu, y = rng.normal(size=2), rng.normal(size=(7, 2))
    theta = np.array([0.5, 0.2, 0.3])
    res = solve_fie(LinearGaussianProblem(mu, y, theta))
    np.testing.assert_allclose(res.trajectory, closed_form(mu, y, *theta), atol=1e-10)


def test_single_measurement_hand_cost():
    prob = LinearGaussianProblem([0.0], [[2.0]], [0.5, 1.0, 2.0])
    X = np.array([[1.0]])
    # (1 - 0)^2 / 0.25 + (1 - 2)^2 / 4
    assert prob.cost(X) == pytest.approx(4.25, abs=1e-15)


@pytest.fixture(scope="module")
def noise_free(robot):
    P = true_params()
    lg, tb = make_dataset(robot, GaitScript(duration=2.0), P, seed=1, noise_scale=0.0)
    return EstimationProblem(robot, lg, P, tb.trajectory.state(0)), tb.trajectory


@pytest.fixture(scope="module")
def noisy(robot, short_dataset, truth_params):
    lg, tb = short_dataset
    return EstimationProblem(robot, lg, truth_params, tb.trajectory.state(0)), tb.trajectory


def max_state_error(X, Y):
    return max(np.max(np.abs(boxminus(X.state(k), Y.state(k)))) for k in range(len(X)))


def test_truth_has_zero_cost_on_noise_free_log(noise_free):
    prob, X = noise_free
    r, _ = build_residuals(X, prob)
    assert prob.cost(X) <= 1e-16
    assert np.max(np.abs(r)) <= 1e-8


def test_init_at_truth_converges_immediately(noise_free):
    prob, X = noise_free
    res = solve_fie(prob, X)
    assert res.converged and res.iterations <= 2 and res.cost <= 1e-16


def test_perturbed_init_recovers_truth(noise_free):
    prob, X = noise_free
    rng = np.random.default_rng(0)
    res = solve_fie(prob, X.boxplus(rng.uniform(-0.1, 0.1, (len(X), X.dim))))
    assert res.converged
    assert max_state_error(res.trajectory, X) <= 1e-6


def test_dead_reckoning_start_converges(noise_free):
    prob, X = noise_free
    res = solve_fie(prob)
    assert res.converged
    assert max_state_error(res.trajectory, X) <= 1e-6


def test_accepted_steps_decrease_cost(noisy):
    prob, X = noisy
    res = solve_fie(prob)
    costs = [h["cost"] for h in res.history if h["accepted"]]
    assert res.converged and len(costs) > 2
    # ties at the rounding floor are decided on the gradient norm
    assert all(b <= a * (1 + 1e-13) for a, b in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]


def test_gradient_matches_fd(noisy):
    prob, X = noisy
    F, _ = kkt_residual(X, prob)
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(12):
        k, i = int(rng.integers(len(X))), int(rng.integers(X.dim))
        tau = np.zeros((len(X), X.dim))
        tau[k, i] = h
        fd = (prob.cost(X.boxplus(tau)) - prob.cost(X.boxplus(-tau))) / (2 * h)
        assert abs(F[k, i] - fd) <= 1e-6 * max(abs(fd), np.max(np.abs(F)) * 1e-3)


def _scaled(params, kappa):
    """Every covariance block scaled by ``kappa`` (factors by sqrt)."""
    th = params.theta.copy()
    th[:params.layout.n_cov] *= np.sqrt(kappa)
    return params.with_theta(th)


def test_covariance_scaling_scales_gradient(noisy):
    prob, X = noisy
    F1, _ = kkt_residual(X, prob)
    F2, _ = kkt_residual(X, prob.with_params(_scaled(prob.params, 2.0)))
    np.testing.assert_allclose(F2, 0.5 * F1, rtol=1e-9, atol=1e-12 * np.max(np.abs(F1)))


def test_solution_invariant_to_common_covariance_scale(noisy):
    prob, _ = noisy
    a = solve_fie(prob)
    b = solve_fie(prob.with_params(_scaled(prob.params, 3.0)), a.trajectory)
    assert b.cost == pytest.approx(a.cost / 3.0, rel=1e-8)
    assert max_state_error(a.trajectory, b.trajectory) <= 1e-8


@pytest.mark.parametrize("name", ["Q_a", "R_alpha", "P0"])
def test_doubling_block_halves_its_cost(noisy, name):
    prob, X = noisy
    X = X.boxplus(np.full((len(X), X.dim), 1e-3))
    th = prob.params.theta.copy()
    th[prob.params.layout.slices[name]] *= np.sqrt(2.0)
    p2 = prob.with_params(prob.params.with_theta(th))
    before = {b.name: b.cost() for b in prob.linearize(X, jacobians=False)}
    after = {b.name: b.cost() for b in p2.linearize(X, jacobians=False)}
    changed = [k for k in before if not np.isclose(before[k], after[k], rtol=1e-12)]
    assert changed
    for k in changed:
        # R_alpha also feeds the velocity channel; only pure blocks halve
        if name != "R_alpha" or k.startswith("meas_p"):
            assert after[k] == pytest.approx(0.5 * before[k], rel=1e-12)


def test_normal_matrix_is_block_tridiagonal(noisy):
    prob, X = noisy
    blocks = prob.linearize(X)
    for b in blocks:
        assert b.E1 is None or np.all(np.diff(b.idx) >= 0)
        idx = np.asarray(b.idx)
        assert idx.min() >= 0 and idx.max() + (0 if b.E1 is None else 1) < prob.n_states
    _, _, H = assemble(blocks, prob.n_states, prob.dim)
    dense = H.to_dense()
    D = prob.dim
    n = prob.n_states
    mask = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) > 1
    off = np.kron(mask, np.ones((D, D), dtype=bool))
    assert np.all(dense[off] == 0.0)
    np.testing.assert_array_equal(dense, dense.T)


def test_mocap_prior_removes_marker_offset(robot, clean_dataset, truth_params):
    lg, tb = clean_dataset
    x = prior_from_mocap(robot, lg, truth_params.theta_foot, truth_params.theta_base)
    np.testing.assert_allclose(x.pose.translation, tb.trajectory.pos[0], atol=1e-12)
    np.testing.assert_allclose(x.foot_positions, tb.trajectory.feet[0], atol=1e-12)


def test_rejects_mismatched_feet(robot, short_dataset, truth_params):
    from legcalib.params import ParamLayout, CalibrationParams

    lg, tb = short_dataset
    lay = ParamLayout(n_feet=2)
    with pytest.raises(ValueError):
        EstimationProblem(robot, lg, CalibrationParams(np.ones(lay.size), lay),
                          tb.trajectory.state(0))
