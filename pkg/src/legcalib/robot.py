"""Leg kinematics, IMU process model, leg-odometry measurement model and
the proprioceptive noise mapping.

Each leg is a serial chain of three revolute joints mounted on the base:

    fk(a) = mount + R1 (o_hip + R2 (o_thigh + R3 (o_calf + theta_foot)))

with ``Ri = Rot(axis_i, a_i)``.  The calf frame ``C`` is the frame after the
third joint, so ``R_BC = R1 R2 R3`` and ``theta_foot`` is expressed in it.
All kinematic functions broadcast over leading dimensions of ``alpha``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import IkOutOfRange, NotPD
from .manifold import (ManifoldState, Pose, Rotation, quat_mul, quat_to_mat,
                       skew, zeta)

ROBOT_SCHEMA_VERSION = 1
GRAVITY = np.array([0.0, 0.0, -9.81])
COV_FLOOR = 1e-12


def axis_rotation(axis, angle):
    """Rodrigues rotation about unit ``axis`` (broadcast over ``angle``)."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    K = skew(axis)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


@dataclass(frozen=True)
class LegGeometry:
    name: str
    mount: np.ndarray
    axes: np.ndarray  # (3, 3), row i = joint i axis in its parent frame
    links: np.ndarray  # (3, 3), rows = hip, thigh, calf vectors


@dataclass(frozen=True)
class RobotKinematics:
    legs: tuple
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    name: str = "quadruped"
    offset_bound: float = 0.1
    base_offset_bound: float = 0.1
    description: dict = field(default=None, compare=False, repr=False)

    @property
    def n_feet(self):
        return len(self.legs)

    @classmethod
    def default(cls, hip=0.08, thigh=0.213, calf=0.213, half_length=0.19,
                half_width=0.05):
        return cls.from_description(default_description(hip, thigh, calf,
                                                         half_length, half_width))

    @classmethod
    def from_description(cls, desc):
        version = desc.get("schema_version")
        if version != ROBOT_SCHEMA_VERSION:
            raise ValueError(f"unsupported robot schema version {version!r}")
        legs = []
        for leg in desc["legs"]:
            side = float(leg.get("side", 1.0))
            links = np.array([[0.0, side * float(leg["hip"]), 0.0],
                              [0.0, 0.0, -float(leg["thigh"])],
                              [0.0, 0.0, -float(leg["calf"])]])
            axes = np.asarray(leg.get("axes", [[1, 0, 0], [0, 1, 0], [0, 1, 0]]),
                              dtype=float)
            axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
            legs.append(LegGeometry(leg["name"], np.asarray(leg["mount"], dtype=float),
                                    axes, links))
        bounds = desc.get("bounds", {})
        return cls(tuple(legs), np.asarray(desc.get("gravity", GRAVITY), dtype=float),
                   desc.get("name", "quadruped"),
                   float(bounds.get("theta_foot", 0.1)),
                   float(bounds.get("theta_base", 0.1)), desc)

    def to_description(self):
        if self.description is not None:
            return self.description
        raise ValueError("robot was not built from a description")

    def hash(self):
        blob = json.dumps(self.to_description(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ------------------------------------------------------------------
    # kinematics

    def _stack(self):
        mounts = np.array([leg.mount for leg in self.legs])
        axes = np.array([leg.axes for leg in self.legs])
        links = np.array([leg.links for leg in self.legs])
        return mounts, axes, links

    def chain(self, alpha, theta_foot=None, alpha_dot=None):
        """Evaluate the kinematic chain of every leg.

        Parameters
        ----------
        alpha : (..., n_f, 3) joint angles
        theta_foot : (n_f, 3) calf-frame foot offsets, default zero
        alpha_dot : (..., n_f, 3) joint rates, optional

        Returns
        -------
        dict with ``p`` (foot position in B), ``R_BC``, ``J``, ``z`` (joint axes
        in B, (..., n_f, 3, 3) with row i = axis i), ``P`` (joint origins),
        and when ``alpha_dot`` is given ``Jdot``, ``w3`` (calf angular
        velocity relative to B) and ``zdot``.
        """
        alpha = np.asarray(alpha, dtype=float)
        mounts, axes, links = self._stack()
        if theta_foot is None:
            theta_foot = np.zeros((self.n_feet, 3))
        theta_foot = np.asarray(theta_foot, dtype=float)
        R1 = _axis_rot_batch(axes[:, 0], alpha[..., 0])
        R2 = _axis_rot_batch(axes[:, 1], alpha[..., 1])
        R3 = _axis_rot_batch(axes[:, 2], alpha[..., 2])
        R12 = R1 @ R2
        R_BC = R12 @ R3
        P1 = np.broadcast_to(mounts, alpha.shape)
        P2 = P1 + _mv(R1, links[:, 0])
        P3 = P2 + _mv(R12, links[:, 1])
        foot = P3 + _mv(R_BC, links[:, 2] + theta_foot)
        z1 = np.broadcast_to(axes[:, 0], alpha.shape)
        z2 = _mv(R1, axes[:, 1])
        z3 = _mv(R12, axes[:, 2])
        z = np.stack([z1, z2, z3], axis=-2)
        P = np.stack([P1, P2, P3], axis=-2)
        J = np.swapaxes(np.cross(z, foot[..., None, :] - P), -1, -2)
        out = {"p": foot, "R_BC": R_BC, "J": J, "z": z, "P": P}
        if alpha_dot is not None:
            ad = np.asarray(alpha_dot, dtype=float)
            w1 = z1 * ad[..., 0:1]
            w2 = w1 + z2 * ad[..., 1:2]
            w3 = w2 + z3 * ad[..., 2:3]
            zdot = np.stack([np.zeros_like(z1), np.cross(w1, z2), np.cross(w2, z3)],
                            axis=-2)
            P2d = np.cross(w1, P2 - P1)
            P3d = P2d + np.cross(w2, P3 - P2)
            footd = P3d + np.cross(w3, foot - P3)
            Pd = np.stack([np.zeros_like(P2d), P2d, P3d], axis=-2)
            Jdot = (np.cross(zdot, foot[..., None, :] - P)
                    + np.cross(z, footd[..., None, :] - Pd))
            out["Jdot"] = np.swapaxes(Jdot, -1, -2)
            out["w3"] = w3
            out["zdot"] = zdot
        return out

    def forward_kinematics(self, alpha, leg, theta_foot_j=None):
        """Foot contact point of one leg in the body frame."""
        theta = np.zeros((self.n_feet, 3))
        if theta_foot_j is not None:
            theta[leg] = theta_foot_j
        full = np.zeros(np.shape(alpha)[:-1] + (self.n_feet, 3))
        full[..., leg, :] = alpha
        return self.chain(full, theta)["p"][..., leg, :]

    def leg_jacobian(self, alpha, leg, theta_foot_j=None):
        theta = np.zeros((self.n_feet, 3))
        if theta_foot_j is not None:
            theta[leg] = theta_foot_j
        full = np.zeros(np.shape(alpha)[:-1] + (self.n_feet, 3))
        full[..., leg, :] = alpha
        return self.chain(full, theta)["J"][..., leg, :, :]

    def leg_jacobian_dot(self, alpha, alpha_dot, leg, theta_foot_j=None):
        theta = np.zeros((self.n_feet, 3))
        if theta_foot_j is not None:
            theta[leg] = theta_foot_j
        full = np.zeros(np.shape(alpha)[:-1] + (self.n_feet, 3))
        fulld = np.zeros_like(full)
        full[..., leg, :] = alpha
        fulld[..., leg, :] = alpha_dot
        return self.chain(full, theta, fulld)["Jdot"][..., leg, :, :]

    def nominal_stance(self):
        """Foot positions at zero joint angles and zero offsets."""
        return self.chain(np.zeros((self.n_feet, 3)))["p"]

    def inverse_kinematics(self, target, theta_foot=None, tol=1e-13, max_iter=50):
        """Joint angles placing each foot contact point at ``target`` (B frame).

        Closed-form solution for the nominal geometry (hip-roll, hip-pitch,
        knee-pitch, knee bent backwards) refined by Newton iterations on the
        full chain including ``theta_foot``.
        """
        target = np.asarray(target, dtype=float)
        mounts, axes, links = self._stack()
        q = target - mounts
        side_y = links[:, 0, 1]
        l2 = -links[:, 1, 2]
        l3 = -links[:, 2, 2]
        r2 = q[..., 1] ** 2 + q[..., 2] ** 2 - side_y ** 2
        zp = -np.sqrt(np.maximum(r2, 1e-6))
        a1 = np.arctan2(q[..., 2], q[..., 1]) - np.arctan2(zp, side_y)
        xp = q[..., 0]
        d2 = xp ** 2 + zp ** 2
        cos3 = (d2 - l2 ** 2 - l3 ** 2) / (2 * l2 * l3)
        # clipped guess; Newton below decides reachability with the offset
        a3 = -np.arccos(np.clip(cos3, -1.0, 0.999))
        k1 = l2 + l3 * np.cos(a3)
        k2 = l3 * np.sin(a3)
        a2 = np.arctan2(-xp, -zp) - np.arctan2(k2, k1)
        alpha = np.stack([a1, a2, a3], axis=-1)
        for _ in range(max_iter):
            ch = self.chain(alpha, theta_foot)
            err = target - ch["p"]
            if np.max(np.abs(err)) < tol:
                return alpha
            # damped Newton keeps near-singular (straight knee) steps bounded
            J = ch["J"]
            JT = np.swapaxes(J, -1, -2)
            step = np.linalg.solve(JT @ J + 1e-12 * np.eye(3), JT @ err[..., None])[..., 0]
            alpha = alpha + np.clip(step, -0.5, 0.5)
        err = target - self.chain(alpha, theta_foot)["p"]
        if np.max(np.abs(err)) > 1e-9:
            raise IkOutOfRange(f"foot target unreachable (residual {np.max(np.abs(err)):.2e} m)")
        return alpha

    def offset_derivatives(self, ch):
        """Derivatives of J and Jdot w.r.t. each calf-frame offset component.

        Both are linear in ``theta_foot``.  Returns ``dJ`` and ``dJdot`` of
        shape (..., n_f, 3 (offset comp), 3, 3); ``dJdot`` is None when the
        chain was evaluated without rates.
        """
        R_BC = ch["R_BC"]
        z = ch["z"]
        # column i of dJ/dtheta_l = z_i x (R_BC e_l)
        cols = np.swapaxes(R_BC, -1, -2)  # row l = R_BC e_l
        dJ = np.cross(z[..., None, :, :], cols[..., :, None, :])  # (...,l,i,3)
        dJ = np.swapaxes(dJ, -1, -2)
        if "Jdot" not in ch:
            return dJ, None
        w3 = ch["w3"]
        wc = np.cross(w3[..., None, :], cols)  # d/dt (R_BC e_l)
        dJd = (np.cross(ch["zdot"][..., None, :, :], cols[..., :, None, :])
               + np.cross(z[..., None, :, :], wc[..., :, None, :]))
        return dJ, np.swapaxes(dJd, -1, -2)


def _axis_rot_batch(axes, angles):
    """axes (n_f, 3), angles (..., n_f) -> (..., n_f, 3, 3)."""
    K = skew(axes)
    s = np.sin(angles)[..., None, None]
    c = np.cos(angles)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _mv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def default_description(hip=0.08, thigh=0.213, calf=0.213, half_length=0.19,
                        half_width=0.05):
    legs = []
    for name, sx, sy in (("FL", 1, 1), ("FR", 1, -1), ("RL", -1, 1), ("RR", -1, -1)):
        legs.append({
            "name": name,
            "mount": [sx * half_length, sy * half_width, 0.0],
            "axes": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            "side": float(sy),
            "hip": hip, "thigh": thigh, "calf": calf,
        })
    return {
        "schema_version": ROBOT_SCHEMA_VERSION,
        "name": "quadruped",
        "gravity": GRAVITY.tolist(),
        "legs": legs,
        "bounds": {"theta_foot": 0.1, "theta_base": 0.1},
    }


def load_robot(path):
    path = Path(path)
    with path.open() as fh:
        desc = yaml.safe_load(fh)
    return RobotKinematics.from_description(desc)


def save_robot(robot, path):
    with Path(path).open("w") as fh:
        yaml.safe_dump(robot.to_description(), fh, sort_keys=False)


# ----------------------------------------------------------------------
# process model

def process_propagate(x, acc, gyro, dt, gravity=GRAVITY):
    """Noise-free IMU propagation of one :class:`ManifoldState`.

    Orientation is updated with the body-frame rate, ``q+ = q (x) zeta(w dt)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    R = x.pose.rotation.matrix()
    a_w = R @ (np.asarray(acc) - x.accel_bias) + gravity
    p = x.pose.translation
    v = x.velocity
    q_next = quat_mul(x.pose.rotation.q, zeta((np.asarray(gyro) - x.gyro_bias) * dt))
    return ManifoldState(Pose(Rotation(q_next), p + v * dt + 0.5 * a_w * dt * dt),
                         v + a_w * dt, x.foot_positions, x.accel_bias, x.gyro_bias)


def propagate_batch(quat, pos, vel, ba, bg, acc, gyro, dt, gravity=GRAVITY):
    """Vectorized mean propagation; every argument has leading dim K."""
    R = quat_to_mat(quat)
    a_w = np.einsum("kij,kj->ki", R, acc - ba) + gravity
    return (quat_mul(quat, zeta((gyro - bg) * dt)),
            pos + vel * dt + 0.5 * a_w * dt * dt,
            vel + a_w * dt)


# ----------------------------------------------------------------------
# measurement model

def measurement_predict(robot, x, alpha, alpha_dot, contact, gyro, theta_foot=None):
    """Model and measured leg-odometry channels for every leg.

    Returns a list of dicts, one per leg, with world-frame ``y_p``/``y_v``
    (model side), ``y_p_meas``/``y_v_meas`` (measured side) and ``active_v``
    (velocity channel gated by contact).
    """
    ch = robot.chain(alpha, theta_foot, alpha_dot)
    R = x.pose.rotation.matrix()
    w = np.asarray(gyro) - x.gyro_bias
    out = []
    for j in range(robot.n_feet):
        fk = ch["p"][j]
        out.append({
            "y_p": x.pose.translation - x.foot_positions[j],
            "y_v": x.velocity.copy(),
            "y_p_meas": -R @ fk,
            "y_v_meas": -R @ (ch["J"][j] @ alpha_dot[j]) - R @ np.cross(w, fk),
            "active_v": bool(contact[j]),
        })
    return out


def noise_mapping(robot, alpha, alpha_dot, omega, theta_foot=None):
    """First-order maps from ``(d_alpha, d_alpha_dot, d_omega)`` to the foot
    position and velocity channels.

    Returns ``G_p`` and ``G_v`` with shape (..., n_f, 3, 9).
    """
    ch = robot.chain(alpha, theta_foot, alpha_dot)
    return _g_from_chain(ch, omega)


def _g_from_chain(ch, omega):
    J = ch["J"]
    W = skew(np.asarray(omega, dtype=float))[..., None, :, :]
    zero = np.zeros_like(J)
    G_p = np.concatenate([J, zero, zero], axis=-1)
    G_v = np.concatenate([ch["Jdot"] + W @ J, J, -skew(ch["p"])], axis=-1)
    return G_p, G_v


def induced_measurement_cov(G_p, G_v, R_z, R_WB, floor=COV_FLOOR):
    """World-frame covariances of the foot position / velocity channels."""
    out = []
    for G in (G_p, G_v):
        S = G @ R_z @ np.swapaxes(G, -1, -2)
        S = 0.5 * (S + np.swapaxes(S, -1, -2))
        lam = np.linalg.eigvalsh(S)
        scale = max(1.0, float(np.max(np.abs(lam))))
        if np.min(lam) < -1e-12 * scale:
            raise NotPD(f"induced covariance has eigenvalue {np.min(lam):.3e}")
        S = R_WB @ S @ np.swapaxes(R_WB, -1, -2)
        S = 0.5 * (S + np.swapaxes(S, -1, -2)) + floor * np.eye(3)
        out.append(S)
    return out[0], out[1]


def proprioceptive_cov(R_alpha, R_alpha_dot, Q_omega):
    R_z = np.zeros((9, 9))
    R_z[:3, :3] = R_alpha
    R_z[3:6, 3:6] = R_alpha_dot
    R_z[6:, 6:] = Q_omega
    return R_z
