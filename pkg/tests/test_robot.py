from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation as SciRot

from legcalib.datagen import GaitScript, make_dataset, true_params
from legcalib.manifold import ManifoldState, Pose, Rotation
from legcalib.params import (CalibrationParams, ParamLayout, assemble_prior_cov,
                             assemble_process_cov)
from legcalib.robot import (RobotKinematics, induced_measurement_cov, load_robot,
                            measurement_predict, noise_mapping, process_propagate,
                            save_robot)

angles = st.lists(st.floats(-1.2, 1.2), min_size=3, max_size=3).map(np.array)


def fk_oracle(robot, alpha, leg, theta):
    """Product of 4x4 homogeneous transforms."""
    g = robot.legs[leg]

    def trans(v):
        T = np.eye(4)
        T[:3, 3] = v
        return T

    def rot(axis, a):
        T = np.eye(4)
        T[:3, :3] = SciRot.from_rotvec(np.asarray(axis) * a).as_matrix()
        return T

    T = (trans(g.mount) @ rot(g.axes[0], alpha[0]) @ trans(g.links[0])
         @ rot(g.axes[1], alpha[1]) @ trans(g.links[1]) @ rot(g.axes[2], alpha[2])
         @ trans(g.links[2] + theta))
    return T[:3, 3]


def test_zero_angles_reproduce_nominal_stance(robot):
    stance = robot.nominal_stance()
    for j, leg in enumerate(robot.legs):
        expect = leg.mount + leg.links.sum(axis=0)
        np.testing.assert_allclose(robot.forward_kinematics(np.zeros(3), j), expect, atol=1e-12)
        np.testing.assert_allclose(stance[j], expect, atol=1e-12)
    # front-left foot of the default robot hangs 0.426 m below its mount
    np.testing.assert_allclose(stance[0], [0.19, 0.13, -0.426], atol=1e-12)


def test_offset_along_calf_axis(robot):
    base = robot.forward_kinematics(np.zeros(3), 1)
    shifted = robot.forward_kinematics(np.zeros(3), 1, np.array([0.0, 0.0, -0.02]))
    np.testing.assert_allclose(shifted - base, [0.0, 0.0, -0.02], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(angles, st.integers(0, 3))
def test_fk_matches_transform_chain(robot, alpha, leg):
    theta = np.array([0.01, -0.02, 0.015])
    np.testing.assert_allclose(robot.forward_kinematics(alpha, leg, theta),
                               fk_oracle(robot, alpha, leg, theta), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(angles, st.integers(0, 3))
def test_jacobian_matches_fd(robot, alpha, leg):
    h = 1e-6
    J = robot.leg_jacobian(alpha, leg)
    fd = np.column_stack([(robot.forward_kinematics(alpha + h * e, leg)
                           - robot.forward_kinematics(alpha - h * e, leg)) / (2 * h)
                          for e in np.eye(3)])
    np.testing.assert_allclose(J, fd, atol=1e-6)
    assert J.shape == (3, 3)


@settings(max_examples=40, deadline=None)
@given(angles, angles, st.integers(0, 3))
def test_jacobian_dot_matches_fd(robot, alpha, alpha_dot, leg):
    d = 1e-5
    Jd = robot.leg_jacobian_dot(alpha, alpha_dot, leg)
    fd = (robot.leg_jacobian(alpha + alpha_dot * d, leg)
          - robot.leg_jacobian(alpha - alpha_dot * d, leg)) / (2 * d)
    np.testing.assert_allclose(Jd, fd, atol=1e-5)


def test_jacobian_dot_zero_rate(robot):
    np.testing.assert_array_equal(robot.leg_jacobian_dot(np.array([0.2, 0.5, -1.0]),
                                                         np.zeros(3), 2), 0.0)


def test_inverse_kinematics_round_trip(robot):
    rng = np.random.default_rng(0)
    alpha = rng.uniform([-0.3, 0.2, -1.8], [0.3, 1.0, -0.8], (4, 3))
    theta = rng.uniform(-0.02, 0.02, (4, 3))
    target = robot.chain(alpha, theta)["p"]
    np.testing.assert_allclose(robot.chain(robot.inverse_kinematics(target, theta),
                                           theta)["p"], target, atol=1e-10)


def _state(R=np.eye(3), p=np.zeros(3), v=np.zeros(3)):
    return ManifoldState(Pose(Rotation.from_matrix(R), p), v, np.zeros((4, 3)))


def test_hovering_is_stationary():
    x = _state(p=np.array([1.0, 2.0, 3.0]))
    y = process_propagate(x, np.array([0, 0, 9.81]), np.zeros(3), 0.01)
    np.testing.assert_allclose(y.pose.translation, x.pose.translation, atol=1e-15)
    np.testing.assert_allclose(y.velocity, 0.0, atol=1e-15)
    np.testing.assert_allclose(y.pose.rotation.q, [1, 0, 0, 0], atol=0)


def test_free_fall():
    y = process_propagate(_state(), np.zeros(3), np.zeros(3), 0.1)
    np.testing.assert_allclose(y.velocity, [0, 0, -0.981], atol=1e-15)
    np.testing.assert_allclose(y.pose.translation, [0, 0, -0.04905], atol=1e-15)


def test_propagation_first_order_convergence():
    """Spin-and-accelerate profile; errors against a 10^4-step reference
    must shrink linearly with the step."""
    def profile(t):
        w = np.array([0.3, -0.2, 0.8]) * (1 + 0.5 * np.sin(t))
        a = np.array([1.0, 0.5, 9.81 + np.cos(2 * t)])
        return a, w

    def run(n, T=1.0):
        x = _state(v=np.array([0.2, 0.0, 0.1]))
        dt = T / n
        for k in range(n):
            a, w = profile(k * dt)
            x = process_propagate(x, a, w, dt)
        return x.pose.translation

    ref = run(10000)
    p100, p200 = run(100), run(200)
    e100 = np.linalg.norm(p100 - ref)
    e200 = np.linalg.norm(p200 - ref)
    assert 1.6 < e100 / e200 < 2.4
    # first-order Richardson estimate of the coarse-grid error
    richardson = 2.0 * np.linalg.norm(p100 - p200)
    assert e100 <= 1.1 * richardson


@pytest.fixture(scope="module")
def noise_free_log(robot):
    P = true_params()
    return make_dataset(robot, GaitScript(duration=5.0), P, seed=3, noise_scale=0.0), P


def test_measurement_consistent_on_noise_free_log(robot, noise_free_log):
    (lg, tb), P = noise_free_log
    assert len(lg) >= 501
    worst_p = worst_v = 0.0
    for k in range(len(lg)):
        x = tb.trajectory.state(k)
        for j, m in enumerate(measurement_predict(robot, x, lg.alpha[k], lg.alpha_dot[k],
                                                  lg.contact[k], lg.gyro[k], P.theta_foot)):
            worst_p = max(worst_p, np.max(np.abs(m["y_p"] - m["y_p_meas"])))
            if m["active_v"]:
                worst_v = max(worst_v, np.max(np.abs(m["y_v"] - m["y_v_meas"])))
    assert worst_p <= 1e-10
    assert worst_v <= 1e-10


def test_unmodelled_offset_shows_in_position_residual(robot, noise_free_log):
    (lg, tb), P = noise_free_log
    for k in (0, 137, 420):
        x = tb.trajectory.state(k)
        ms = measurement_predict(robot, x, lg.alpha[k], lg.alpha_dot[k], lg.contact[k],
                                 lg.gyro[k], np.zeros((4, 3)))
        for j, m in enumerate(ms):
            r = np.linalg.norm(m["y_p"] - m["y_p_meas"])
            np.testing.assert_allclose(r, np.linalg.norm(P.theta_foot[j]), rtol=1e-9)


def test_swing_leg_velocity_gated(robot):
    x = _state()
    ms = measurement_predict(robot, x, np.zeros((4, 3)), np.ones((4, 3)),
                             np.array([1, 0, 1, 0], bool), np.zeros(3))
    assert [m["active_v"] for m in ms] == [True, False, True, False]


def _body_channels(robot, alpha, alpha_dot, omega):
    ch = robot.chain(alpha, None, alpha_dot)
    yv = np.einsum("jab,jb->ja", ch["J"], alpha_dot) + np.cross(omega, ch["p"])
    return ch["p"], yv


def test_noise_mapping_first_order(robot):
    rng = np.random.default_rng(1)
    alpha = rng.uniform(-0.8, 0.8, (4, 3))
    alpha_dot = rng.normal(size=(4, 3))
    omega = rng.normal(size=3)
    G_p, G_v = noise_mapping(robot, alpha, alpha_dot, omega)
    p0, v0 = _body_channels(robot, alpha, alpha_dot, omega)
    dz = rng.normal(size=(4, 9))
    errs = []
    for s in (1e-3, 5e-4):
        # the gyro perturbation is shared by all legs
        dzs = s * dz
        dzs[:, 6:] = s * dz[0, 6:]
        p1, v1 = _body_channels(robot, alpha + dzs[:, :3], alpha_dot + dzs[:, 3:6],
                                omega + dzs[0, 6:])
        ep = p1 - p0 - np.einsum("jab,jb->ja", G_p, dzs)
        ev = v1 - v0 - np.einsum("jab,jb->ja", G_v, dzs)
        errs.append(np.linalg.norm(np.concatenate([ep.ravel(), ev.ravel()])))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_noise_mapping_zero_rate(robot):
    alpha = np.tile([0.1, 0.7, -1.4], (4, 1))
    G_p, G_v = noise_mapping(robot, alpha, np.zeros((4, 3)), np.zeros(3))
    np.testing.assert_array_equal(G_v[..., :3], 0.0)
    np.testing.assert_array_equal(G_p[..., :3], G_v[..., 3:6])


def test_noise_mapping_fk_zero_edge():
    desc = {"schema_version": 1, "legs": [{"name": "L", "mount": [0, 0, 0], "side": 1.0,
                                           "hip": 0.0, "thigh": 0.0, "calf": 0.0}]}
    r = RobotKinematics.from_description(desc)
    _, G_v = noise_mapping(r, np.zeros((1, 3)), np.ones((1, 3)), np.ones(3))
    np.testing.assert_array_equal(G_v[0, :, 6:], 0.0)


def test_induced_cov_identity():
    G_p = np.hstack([np.eye(3), np.zeros((3, 6))])
    R_pf, _ = induced_measurement_cov(G_p, G_p, np.eye(9), np.eye(3), floor=0.0)
    np.testing.assert_array_equal(R_pf, np.eye(3))


def test_induced_cov_psd_and_rotation_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        G_p, G_v = rng.normal(size=(3, 9)), rng.normal(size=(3, 9))
        A = rng.normal(size=(9, 9))
        R_z = A @ A.T
        R = SciRot.random(random_state=rng).as_matrix()
        a, b = induced_measurement_cov(G_p, G_v, R_z, np.eye(3), floor=0.0)
        c, d = induced_measurement_cov(G_p, G_v, R_z, R, floor=0.0)
        assert np.min(np.linalg.eigvalsh(a)) >= -1e-14 * np.max(np.abs(a))
        np.testing.assert_allclose(np.trace(c), np.trace(a), rtol=1e-12)
        np.testing.assert_allclose(np.trace(d), np.trace(b), rtol=1e-12)


def test_cholesky_block_example():
    lay = ParamLayout(modes=(("Q_a", "full"),))
    # (L00; L10, L11) of the leading 2x2 corner, rest of the block identity-like
    vec = np.array([1.0, 0.5, 2.0, 0.0, 0.0, 1.0])
    S = lay.cov_from_factor_vec("Q_a", vec)
    np.testing.assert_allclose(S[:2, :2], [[1.0, 0.5], [0.5, 4.25]])
    np.testing.assert_array_equal(lay.factor_vec("Q_a", np.linalg.cholesky(S)), vec)


def test_identity_factors_give_identity_blocks():
    stds = {name: 1.0 for name in ("Q_p", "Q_a", "Q_w", "Q_foot", "Q_ba", "Q_bw",
                                   "R_alpha", "R_alphadot", "P0")}
    P = CalibrationParams.from_stds(stds)
    Q = assemble_process_cov(P, 0.01)
    np.testing.assert_allclose(Q["Q_ba"], 0.01 * np.eye(3))
    np.testing.assert_allclose(Q["Q_a"], 1e-4 * np.eye(3))
    np.testing.assert_array_equal(assemble_prior_cov(P), np.eye(27))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-4, 10.0), min_size=6, max_size=6),
       st.lists(st.floats(-10.0, 10.0), min_size=3, max_size=3))
def test_full_blocks_symmetric_pd(diag, off):
    lay = ParamLayout(modes=(("R_alpha", "full"),))
    vec = np.array([diag[0], off[0], diag[1], off[1], off[2], diag[2]])
    S = lay.cov_from_factor_vec("R_alpha", vec)
    assert np.max(np.abs(S - S.T)) == 0.0
    np.linalg.cholesky(S + 1e-12 * np.eye(3))
    theta = np.zeros(lay.size)
    theta[lay.slices["R_alpha"]] = vec
    np.testing.assert_array_equal(lay.factor_vec("R_alpha", lay.factor(theta, "R_alpha")), vec)


def test_robot_file_round_trip(tmp_path, robot):
    save_robot(robot, tmp_path / "r.yaml")
    r2 = load_robot(tmp_path / "r.yaml")
    assert r2.hash() == robot.hash()
    np.testing.assert_array_equal(r2.nominal_stance(), robot.nominal_stance())
