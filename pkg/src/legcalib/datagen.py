"""Deterministic synthetic gait data with exact ground truth.

The base trajectory is analytic (forward motion, yaw rate and small
sinusoidal sway in every pose direction).  Truth is made consistent with the
discrete process model at machine precision: velocities are sampled from the
analytic curve, positions are integrated with the trapezoid rule and the
IMU inputs are chosen so that one noise-free propagation step maps state k
exactly onto state k+1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .logfile import SensorLog, TruthBundle
from .manifold import Trajectory, mat_to_quat, quat_to_mat, so3_log_mat
from .params import CalibrationParams


@dataclass(frozen=True)
class GaitScript:
    """Scripted base motion and foot schedule.

    Attributes
    ----------
    duration : float
        Length of the log in seconds; the number of steps is
        ``round(duration / dt)``.
    dt : float
        Sample period in seconds, within [0.002, 0.02].
    gait : str
        ``"stand"`` (all feet in contact) or ``"trot"`` (diagonal pairs).
    speed : float
        Mean forward speed in m/s.
    yaw_rate : float
        Constant yaw rate in rad/s.
    period, duty : float
        Gait cycle length in seconds and stance fraction (> 0.5 for trot so
        that at least one pair is always in contact).
    step_height, body_height : float
        Swing apex and nominal base height in m.
    sway : tuple
        Amplitudes of the sinusoidal excitation ``(x, y, z, roll, pitch, yaw)``
        in m and rad.
    sway_freq : tuple
        Matching frequencies in Hz.
    """

    duration: float = 4.0
    dt: float = 0.01
    gait: str = "trot"
    speed: float = 0.3
    yaw_rate: float = 0.1
    period: float = 0.5
    duty: float = 0.6
    step_height: float = 0.06
    body_height: float = 0.30
    sway: tuple = (0.01, 0.09, 0.02, 0.24, 0.24, 0.15)
    sway_freq: tuple = (0.7, 0.45, 1.3, 0.9, 0.6, 0.35)

    def __post_init__(self):
        if not 0.002 <= self.dt <= 0.02:
            raise ValueError("dt must lie in [0.002, 0.02]")
        if self.gait not in ("stand", "trot"):
            raise ValueError(f"unknown gait '{self.gait}'")
        if self.gait == "trot" and not 0.5 < self.duty < 1.0:
            raise ValueError("trot needs 0.5 < duty < 1 to keep a pair in contact")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def n_steps(self):
        return int(round(self.duration / self.dt))

    @property
    def stride_length(self):
        return self.speed * self.period

    @classmethod
    def stand(cls, duration=2.0, dt=0.01, sway=(0.0,) * 6):
        return cls(duration=duration, dt=dt, gait="stand", speed=0.0, yaw_rate=0.0,
                   sway=tuple(sway))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("sway", "sway_freq"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


# leg phase offsets (FL, FR, RL, RR): diagonal pairs FL/RR and FR/RL
TROT_OFFSETS = (0.0, 0.5, 0.5, 0.0)


class BaseMotion:
    """Analytic base pose, velocity and their derivatives."""

    def __init__(self, script):
        self.s = script
        self.amp = np.asarray(script.sway, dtype=float)
        self.w = 2.0 * np.pi * np.asarray(script.sway_freq, dtype=float)

    def _sw(self, t, i, der=0):
        a, w = self.amp[i], self.w[i]
        if der == 0:
            return a * np.sin(w * t)
        return a * w * np.cos(w * t)

    def yaw(self, t, der=0):
        s = self.s
        return (s.yaw_rate * (t if der == 0 else np.ones_like(t))) + self._sw(t, 5, der)

    def attitude(self, t):
        """Roll, pitch, yaw (ZYX) at times t."""
        return self._sw(t, 3), self._sw(t, 4), self.yaw(t)

    def rotation(self, t):
        roll, pitch, yaw = self.attitude(np.asarray(t, dtype=float))
        return _rz(yaw) @ _ry(pitch) @ _rx(roll)

    def velocity(self, t):
        """World-frame base velocity: forward speed along the heading plus sway."""
        t = np.asarray(t, dtype=float)
        yaw = self.yaw(t)
        fwd = self.s.speed + self._sw(t, 0, 1)
        lat = self._sw(t, 1, 1)
        c, s = np.cos(yaw), np.sin(yaw)
        return np.stack([c * fwd - s * lat, s * fwd + c * lat, self._sw(t, 2, 1)], axis=-1)

    def position_approx(self, t):
        """Closed-form position ignoring the heading-sway coupling (used only
        for foot placement)."""
        t = np.asarray(t, dtype=float)
        x = np.zeros(t.shape + (3,))
        # integrate velocity by fine trapezoid from 0
        grid = np.linspace(0.0, max(float(np.max(np.abs(t))), 1e-9), 4001)
        v = self.velocity(grid)
        cum = np.concatenate([np.zeros((1, 3)),
                              np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(grid)[:, None], axis=0)])
        for i in range(3):
            x[..., i] = np.interp(t, grid, cum[:, i])
        x[..., 2] += self.s.body_height
        return x


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1),
                     np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1),
                     np.stack([z, z, o], -1)], -2)


@dataclass
class GroundTruth:
    """Noise-free kinematic truth on the sample grid (N = n_steps + 1).

    ``omega``/``acc_world`` are the exact discrete IMU inputs; ``alpha`` and
    ``alpha_dot`` the exact joint signals for the offsets used.
    """

    t: np.ndarray
    trajectory: Trajectory
    omega: np.ndarray
    acc_world: np.ndarray
    alpha: np.ndarray
    alpha_dot: np.ndarray
    contact: np.ndarray
    theta_foot: np.ndarray


def foot_schedule(script, n_feet, t):
    """Contact flags (N, n_f), stance index and swing fraction per leg."""
    t = np.asarray(t, dtype=float)
    if script.gait == "stand":
        z = np.zeros((t.size, n_feet))
        return np.ones((t.size, n_feet), dtype=bool), z.astype(int), z
    offs = np.asarray(TROT_OFFSETS[:n_feet])
    u = t[:, None] / script.period + offs
    n = np.floor(u).astype(int)
    frac = u - n
    stance = frac < script.duty
    s = np.where(stance, 0.0, (frac - script.duty) / (1.0 - script.duty))
    return stance, n, s


def _placements(script, robot, motion, n_feet, cycles):
    """World foot placement for stance ``n`` of leg j: below the hip at the
    stance mid-time."""
    nominal = robot.nominal_stance()
    offs = np.asarray(TROT_OFFSETS[:n_feet]) if script.gait == "trot" else np.zeros(n_feet)
    t_c = (cycles - offs + 0.5 * script.duty) * script.period
    if script.gait == "stand":
        t_c = np.zeros_like(cycles, dtype=float)
    p = motion.position_approx(t_c)
    yaw = motion.yaw(t_c)
    c, s = np.cos(yaw), np.sin(yaw)
    nx, ny = nominal[:, 0], nominal[:, 1]
    out = np.empty(cycles.shape + (3,))
    out[..., 0] = p[..., 0] + c * nx - s * ny
    out[..., 1] = p[..., 1] + s * nx + c * ny
    out[..., 2] = 0.0
    return out


def generate_trajectory(script, robot, theta_foot=None, x0=None):
    """Noise-free truth for a gait script.

    Parameters
    ----------
    script : GaitScript
    robot : RobotKinematics
    theta_foot : (n_f, 3), optional
        True calf-frame foot offsets used by the inverse kinematics.
    x0 : (3,), optional
        Initial base position (default ``(0, 0, body_height)``).

    Raises
    ------
    IkOutOfRange
        When the script asks for a foot position outside the workspace.
    """
    nf = robot.n_feet
    theta_foot = np.zeros((nf, 3)) if theta_foot is None else np.asarray(theta_foot, float)
    motion = BaseMotion(script)
    dt = script.dt
    N = script.n_steps + 1
    t = np.arange(N + 1) * dt  # one extra sample defines the last gyro reading
    R = motion.rotation(t)
    v = motion.velocity(t)
    if script.gait == "stand" and not np.any(script.sway):
        v = np.zeros_like(v)
    p = np.empty_like(v)
    p[0] = (0.0, 0.0, script.body_height) if x0 is None else x0
    p[1:] = p[0] + np.cumsum(0.5 * (v[1:] + v[:-1]) * dt, axis=0)
    quat = mat_to_quat(R)
    R = quat_to_mat(quat)
    # exact discrete IMU inputs
    omega = so3_log_mat(np.swapaxes(R[:-1], -1, -2) @ R[1:]) / dt
    acc_world = (v[1:] - v[:-1]) / dt
    # recompute positions so p_{k+1} = p_k + v_k dt + a dt^2 / 2 holds to rounding
    for k in range(N):
        p[k + 1] = p[k] + v[k] * dt + 0.5 * acc_world[k] * dt * dt

    contact, cyc, s = foot_schedule(script, nf, t)
    place_now = _placements(script, robot, motion, nf, cyc)
    place_next = _placements(script, robot, motion, nf, cyc + 1)
    S = s[..., None]
    blend = 3 * S ** 2 - 2 * S ** 3
    dblend = (6 * S - 6 * S ** 2) / ((1.0 - script.duty) * script.period)
    feet = place_now + (place_next - place_now) * blend
    feet_dot = (place_next - place_now) * dblend
    bump = np.sin(np.pi * s) ** 2
    feet[..., 2] += np.where(contact, 0.0, script.step_height * bump)
    feet_dot[..., 2] += np.where(
        contact, 0.0, script.step_height * np.pi * np.sin(2 * np.pi * s)
        / ((1.0 - script.duty) * script.period))
    feet = np.where(contact[..., None], place_now, feet)
    feet_dot = np.where(contact[..., None], 0.0, feet_dot)

    RT = np.swapaxes(R, -1, -2)
    target = np.einsum("nij,nfj->nfi", RT, feet - p[:, None, :])
    alpha = robot.inverse_kinematics(target[:N], theta_foot)
    ch = robot.chain(alpha, theta_foot)
    # joint rates from the body-frame foot velocity, using the discrete rate
    rhs = (np.einsum("nij,nfj->nfi", RT[:N], feet_dot[:N] - v[:N, None, :])
           - np.cross(omega[:, None, :], ch["p"]))
    alpha_dot = np.linalg.solve(ch["J"], rhs[..., None])[..., 0]

    X = Trajectory(quat[:N], p[:N], v[:N], feet[:N])
    return GroundTruth(t[:N], X, omega, acc_world, alpha, alpha_dot, contact[:N], theta_foot)


def synthesize_sensors(truth, robot, params, seed=0, gravity=None, noise_scale=1.0,
                       bias0=None):
    """Noisy sensor log from a noise-free truth.

    ``params`` holds the true standard deviations and offsets; its
    ``theta_foot`` must match the one used by :func:`generate_trajectory`.
    IMU noise is white per sample with covariance ``Q_a``/``Q_w``; biases are
    random walks with per-step covariance ``Q_ba dt``/``Q_bw dt``; encoders
    get white noise ``R_alpha``/``R_alphadot``.  Mocap reports the marker
    pose ``(R, p + R theta_base)`` and the base velocity without noise.

    Returns ``(SensorLog, TruthBundle)``; the bundle carries the truth
    trajectory including the bias sequences.
    """
    if not np.allclose(params.theta_foot, truth.theta_foot):
        raise ValueError("params.theta_foot differs from the offsets used for the truth")
    rng = np.random.default_rng(seed)
    g = robot.gravity if gravity is None else np.asarray(gravity, float)
    X = truth.trajectory
    N = len(X)
    dt = float(truth.t[1] - truth.t[0])
    R = X.R

    def draw(name, shape):
        L = params.factor(name) * noise_scale
        z = rng.standard_normal(shape + (L.shape[0],))
        return z @ L.T

    ba = np.zeros((N, 3)) if bias0 is None else np.broadcast_to(bias0[0], (N, 3)).copy()
    bg = np.zeros((N, 3)) if bias0 is None else np.broadcast_to(bias0[1], (N, 3)).copy()
    ba[1:] += np.cumsum(draw("Q_ba", (N - 1,)) * np.sqrt(dt), axis=0)
    bg[1:] += np.cumsum(draw("Q_bw", (N - 1,)) * np.sqrt(dt), axis=0)
    acc = np.einsum("nji,nj->ni", R, truth.acc_world[:N] - g) + ba + draw("Q_a", (N,))
    gyro = truth.omega[:N] + bg + draw("Q_w", (N,))
    nf = robot.n_feet
    alpha = truth.alpha + draw("R_alpha", (N, nf))
    alpha_dot = truth.alpha_dot + draw("R_alphadot", (N, nf))
    mq = X.quat.copy()
    mp = X.pos + np.einsum("nij,j->ni", R, params.theta_base)
    log = SensorLog(dt, acc, gyro, alpha, alpha_dot, truth.contact.copy(), mq, mp,
                    X.vel.copy(), robot_hash=robot.hash())
    Xt = Trajectory(X.quat, X.pos, X.vel, X.feet, ba, bg)
    return log, TruthBundle(Xt, params.theta.copy())


def true_params(theta_foot=(0.01, -0.005, 0.02), theta_base=(0.05, 0.02, 0.03),
                n_feet=4, sigma_alpha=1e-3, layout=None):
    """Default generating parameters (standard deviations per block)."""
    stds = default_stds(sigma_alpha)
    tf = np.broadcast_to(np.asarray(theta_foot, float), (n_feet, 3))
    return CalibrationParams.from_stds(stds, tf, theta_base, layout)


def default_stds(sigma_alpha=1e-3):
    return {
        "Q_p": 1e-3,          # m / sqrt(s), pseudo process noise on position
        "Q_a": 0.05,          # m/s^2 per sample
        "Q_w": 2e-3,          # rad/s per sample
        "Q_foot": 2e-3,       # m / sqrt(s)
        "Q_ba": 2e-3,         # m/s^2 / sqrt(s)
        "Q_bw": 2e-4,         # rad/s / sqrt(s)
        "R_alpha": sigma_alpha,
        "R_alphadot": 5e-3,   # rad/s
        "P0": 1e-2,
    }


def make_dataset(robot, script, params, seed=0, noise_scale=1.0):
    """Truth plus noisy log for one script and parameter vector."""
    gt = generate_trajectory(script, robot, params.theta_foot)
    log, bundle = synthesize_sensors(gt, robot, params, seed=seed, noise_scale=noise_scale)
    return log, bundle
