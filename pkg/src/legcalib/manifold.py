"""SO(3)/SE(3) algebra and the product state manifold SE(3) x R^n.

Conventions
-----------
* Quaternions are Hamilton, ordered ``(w, x, y, z)``, and represent the
  body-to-world rotation ``R_WB``.  Every quaternion returned here is unit
  norm with ``w >= 0``.
* Twists are ordered ``(rotation, translation)``.
* Perturbations act on the LEFT: ``x [+] tau`` applies ``exp(tau_pose) * T``.
* State tangent layout: ``(rot 3, trans 3, vel 3, feet 3*n_f, b_a 3, b_w 3)``.

All functions accept arbitrary leading batch dimensions unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi

SERIES_EPS = 1e-8
PI_MARGIN = 1e-6


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def se3_hat(xi):
    """4x4 matrix form of a twist ``(w, v)``."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def se3_vee(m):
    m = np.asarray(m, dtype=float)
    return np.concatenate([vee(m[..., :3, :3]), m[..., :3, 3]], axis=-1)


# --------------------------------------------------------------------------
# quaternions

def quat_canon(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)
    return quat_canon(out)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_mat(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def mat_to_quat(R):
    """Rotation matrix to canonical quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    out = np.empty((Rf.shape[0], 4))
    tr = np.trace(Rf, axis1=1, axis2=2)
    diag = np.stack([Rf[:, 0, 0], Rf[:, 1, 1], Rf[:, 2, 2]], axis=1)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    for i in range(Rf.shape[0]):
        m = Rf[i]
        c = choice[i]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[i])
            out[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            out[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
            out[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
            out[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_canon(out.reshape(batch + (4,)))


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_mat(q), v)


# --------------------------------------------------------------------------
# SO(3)

def zeta(phi):
    """Rotation vector to unit quaternion (second-order series near zero)."""
    phi = np.asarray(phi, dtype=float)
    th2 = np.sum(phi * phi, axis=-1)
    th = np.sqrt(th2)
    small = th < SERIES_EPS
    safe = np.where(small, 1.0, th)
    w = np.where(small, 1.0 - th2 / 8.0, np.cos(0.5 * safe))
    k = np.where(small, 0.5 - th2 / 48.0, np.sin(0.5 * safe) / safe)
    q = np.concatenate([w[..., None], k[..., None] * phi], axis=-1)
    return quat_canon(q)


def so3_exp(phi):
    """Rotation vector to :class:`Rotation`."""
    return Rotation(zeta(phi))


def so3_exp_mat(phi):
    return quat_to_mat(zeta(phi))


def so3_log(q):
    """Canonical quaternion to rotation vector (angle in [0, pi])."""
    q = quat_canon(q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < SERIES_EPS
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(w == 0.0, 1.0, w)
    # atan2(n, w) / n  ->  1/w - n^2 / (3 w^3) as n -> 0
    k = np.where(small, 1.0 / safe_w - n * n / (3.0 * safe_w ** 3),
                 np.arctan2(n, w) / safe_n)
    return 2.0 * k[..., None] * v


def so3_log_mat(R):
    return so3_log(mat_to_quat(R))


def _coef_a(th):
    """sin(th)/th"""
    small = th < 1e-4
    safe = np.where(small, 1.0, th)
    t2 = th * th
    return np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)


def _coef_b(th):
    """(1 - cos th)/th^2"""
    small = th < 1e-4
    safe = np.where(small, 1.0, th)
    t2 = th * th
    direct = 2.0 * np.sin(0.5 * safe) ** 2 / (safe * safe)
    return np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, direct)


def _coef_c(th):
    """(th - sin th)/th^3"""
    small = th < 1e-2
    safe = np.where(small, 1.0, th)
    t2 = th * th
    series = 1 / 6 - t2 / 120 + t2 ** 2 / 5040 - t2 ** 3 / 362880 + t2 ** 4 / 39916800
    return np.where(small, series, (safe - np.sin(safe)) / safe ** 3)


def _coef_vinv(th):
    """1/th^2 - (1 + cos th)/(2 th sin th)"""
    small = th < 1e-2
    safe = np.where(small, 1.0, th)
    t2 = th * th
    series = 1 / 12 + t2 / 720 + t2 ** 2 / 30240 + t2 ** 3 / 1209600
    direct = 1.0 / safe ** 2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe))
    return np.where(small, series, direct)


def _coef_d(th):
    """(th^2/2 + cos th - 1)/th^4"""
    small = th < 1e-1
    safe = np.where(small, 1.0, th)
    t2 = th * th
    series = 1 / 24 - t2 / 720 + t2 ** 2 / 40320 - t2 ** 3 / 3628800 + t2 ** 4 / 479001600
    return np.where(small, series, (0.5 * safe ** 2 + np.cos(safe) - 1.0) / safe ** 4)


def _coef_e(th):
    """(2 th - 3 sin th + th cos th)/(2 th^5)"""
    small = th < 1e-1
    safe = np.where(small, 1.0, th)
    t2 = th * th
    series = 1 / 120 - t2 / 2520 + t2 ** 2 / 120960 - t2 ** 3 / 9979200
    direct = (2.0 * safe - 3.0 * np.sin(safe) + safe * np.cos(safe)) / (2.0 * safe ** 5)
    return np.where(small, series, direct)


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    P = skew(phi)
    eye = np.broadcast_to(np.eye(3), P.shape)
    return (eye + _coef_b(th)[..., None, None] * P
            + _coef_c(th)[..., None, None] * (P @ P))


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    P = skew(phi)
    eye = np.broadcast_to(np.eye(3), P.shape)
    return eye - 0.5 * P + _coef_vinv(th)[..., None, None] * (P @ P)


def so3_right_jacobian(phi):
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


# --------------------------------------------------------------------------
# SE(3) on (quaternion, translation) pairs

def se3_exp_qt(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return zeta(phi), t


def se3_log_qt(q, t):
    phi = so3_log(q)
    th = np.linalg.norm(phi, axis=-1)
    if np.any(th > np.pi - PI_MARGIN):
        raise AngleNearPi(f"rotation angle {float(np.max(th)):.9f} too close to pi")
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), t)
    return np.concatenate([phi, rho], axis=-1)


def se3_q_matrix(xi):
    """Off-diagonal block of the SE(3) left Jacobian (twist order (w, v))."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    th = np.linalg.norm(phi, axis=-1)
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    c = _coef_c(th)[..., None, None]
    d = _coef_d(th)[..., None, None]
    e = _coef_e(th)[..., None, None]
    return (0.5 * Rh + c * (PR + RP + PRP) + d * (P @ PR + RP @ P - 3.0 * PRP)
            + e * (PRP @ P + P @ PRP))


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = se3_q_matrix(xi)
    return out


def se3_left_jacobian_inv(xi):
    """Closed-form inverse: ``log(exp(d) exp(xi)) = xi + J_l^{-1}(xi) d + O(d^2)``."""
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ se3_q_matrix(xi) @ Ji
    return out


def se3_right_jacobian_inv(xi):
    """``log(exp(xi) exp(d)) = xi + J_r^{-1}(xi) d + O(d^2)``."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(q, t):
    """Adjoint of (R, t) acting on twists ordered (w, v)."""
    R = quat_to_mat(q)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = skew(t) @ R
    return out


# --------------------------------------------------------------------------
# value types

@dataclass(frozen=True)
class Rotation:
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canon(self.q))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R):
        return cls(mat_to_quat(R))

    def matrix(self):
        return quat_to_mat(self.q)

    def __mul__(self, other):
        return Rotation(quat_mul(self.q, other.q))

    def inverse(self):
        return Rotation(quat_conj(self.q))

    def log(self):
        return so3_log(self.q)


@dataclass(frozen=True)
class Pose:
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).copy())

    @classmethod
    def identity(cls):
        return cls(Rotation.identity(), np.zeros(3))

    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    def __mul__(self, other):
        R = self.rotation.matrix()
        return Pose(self.rotation * other.rotation,
                    R @ other.translation + self.translation)

    def inverse(self):
        inv = self.rotation.inverse()
        return Pose(inv, -(inv.matrix() @ self.translation))


def se3_exp(xi):
    """Twist ``(w, v)`` to :class:`Pose`."""
    q, t = se3_exp_qt(xi)
    return Pose(Rotation(q), t)


def se3_log(T):
    """:class:`Pose` to twist ``(w, v)``; raises :class:`AngleNearPi`."""
    return se3_log_qt(T.rotation.q, T.translation)


def tangent_dim(n_feet):
    return 6 + n_eucl(n_feet)


def n_eucl(n_feet):
    return 3 + 3 * n_feet + 6


@dataclass(frozen=True)
class ManifoldState:
    pose: Pose
    velocity: np.ndarray
    foot_positions: np.ndarray
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("velocity", "foot_positions", "accel_bias", "gyro_bias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).copy())

    @property
    def n_feet(self):
        return self.foot_positions.shape[0]

    @property
    def dim(self):
        return tangent_dim(self.n_feet)

    def euclidean(self):
        return np.concatenate([self.velocity, self.foot_positions.ravel(),
                               self.accel_bias, self.gyro_bias])


def _split_eucl(e, n_feet):
    v = e[..., :3]
    feet = e[..., 3:3 + 3 * n_feet].reshape(e.shape[:-1] + (n_feet, 3))
    ba = e[..., 3 + 3 * n_feet:6 + 3 * n_feet]
    bg = e[..., 6 + 3 * n_feet:9 + 3 * n_feet]
    return v, feet, ba, bg


def boxplus(x, tau):
    """``x [+] tau`` with a left-applied SE(3) increment."""
    tau = np.asarray(tau, dtype=float)
    dq, dt = se3_exp_qt(tau[:6])
    Rd = quat_to_mat(dq)
    pose = Pose(Rotation(quat_mul(dq, x.pose.rotation.q)),
                Rd @ x.pose.translation + dt)
    v, feet, ba, bg = _split_eucl(tau[6:], x.n_feet)
    return ManifoldState(pose, x.velocity + v, x.foot_positions + feet,
                         x.accel_bias + ba, x.gyro_bias + bg)


def boxminus(x1, x2):
    """Tangent vector ``tau`` with ``x2 [+] tau == x1``."""
    rel = x1.pose * x2.pose.inverse()
    return np.concatenate([se3_log(rel), x1.euclidean() - x2.euclidean()])


# --------------------------------------------------------------------------
# batched trajectories

class Trajectory:
    """Sequence of states stored as stacked arrays.

    Attributes
    ----------
    quat : (N, 4) canonical quaternions (R_WB)
    pos, vel, ba, bg : (N, 3)
    feet : (N, n_f, 3) world-frame foot positions
    """

    def __init__(self, quat, pos, vel, feet, ba=None, bg=None):
        self.quat = quat_canon(np.array(quat, dtype=float))
        self.pos = np.array(pos, dtype=float)
        self.vel = np.array(vel, dtype=float)
        self.feet = np.array(feet, dtype=float)
        n = self.pos.shape[0]
        self.ba = np.zeros((n, 3)) if ba is None else np.array(ba, dtype=float)
        self.bg = np.zeros((n, 3)) if bg is None else np.array(bg, dtype=float)
        self._R = None

    def __len__(self):
        return self.pos.shape[0]

    @property
    def n_feet(self):
        return self.feet.shape[1]

    @property
    def dim(self):
        return tangent_dim(self.n_feet)

    @property
    def R(self):
        if self._R is None:
            self._R = quat_to_mat(self.quat)
        return self._R

    def copy(self):
        return Trajectory(self.quat, self.pos, self.vel, self.feet, self.ba, self.bg)

    def state(self, k):
        return ManifoldState(Pose(Rotation(self.quat[k]), self.pos[k]), self.vel[k],
                             self.feet[k], self.ba[k], self.bg[k])

    @classmethod
    def from_states(cls, states):
        return cls(np.array([s.pose.rotation.q for s in states]),
                   np.array([s.pose.translation for s in states]),
                   np.array([s.velocity for s in states]),
                   np.array([s.foot_positions for s in states]),
                   np.array([s.accel_bias for s in states]),
                   np.array([s.gyro_bias for s in states]))

    def slice(self, start, stop):
        return Trajectory(self.quat[start:stop], self.pos[start:stop],
                          self.vel[start:stop], self.feet[start:stop],
                          self.ba[start:stop], self.bg[start:stop])

    def boxplus(self, tau):
        tau = np.asarray(tau, dtype=float).reshape(len(self), self.dim)
        dq, dt = se3_exp_qt(tau[:, :6])
        Rd = quat_to_mat(dq)
        pos = np.einsum("nij,nj->ni", Rd, self.pos) + dt
        v, feet, ba, bg = _split_eucl(tau[:, 6:], self.n_feet)
        return Trajectory(quat_mul(dq, self.quat), pos, self.vel + v,
                          self.feet + feet, self.ba + ba, self.bg + bg)

    def boxminus(self, other):
        """Per-step tangent differences, shape (N, dim)."""
        qrel = quat_mul(self.quat, quat_conj(other.quat))
        trel = self.pos - np.einsum("nij,nj->ni", quat_to_mat(qrel), other.pos)
        pose = se3_log_qt(qrel, trel)
        return np.concatenate([
            pose, self.vel - other.vel,
            (self.feet - other.feet).reshape(len(self), -1),
            self.ba - other.ba, self.bg - other.bg], axis=1)
