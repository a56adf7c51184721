"""Full-information MAP smoothing as sparse nonlinear least squares.

The cost is ``J(X) = sum_b e_b^T Sigma_b^{-1} e_b`` over prior, process and
measurement blocks.  Every block couples at most two consecutive states, so
the Gauss-Newton matrix ``H = 2 A^T A`` is block tridiagonal and the
stationarity condition is ``F = 2 A^T r = 0`` in tangent coordinates.

The solver only sees :class:`ResidualBlock` lists, so any problem exposing
``n_states``, ``dim``, ``linearize`` and ``retract`` can be solved (the
linear-Gaussian oracle problem below uses this).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import blocktri
from .errors import NotFactorizable, NotPD
from .manifold import (
    ManifoldState,
    Pose,
    Rotation,
    Trajectory,
    quat_conj,
    quat_mul,
    quat_to_mat,
    se3_left_jacobian_inv,
    se3_log_qt,
    se3_right_jacobian_inv,
    skew,
    so3_right_jacobian,
    tangent_dim,
    zeta,
)
from .params import DT_POWER, check_box
from .robot import _g_from_chain, propagate_batch

log = logging.getLogger(__name__)

# Jitter added to the induced measurement covariances, relative to their
# mean eigenvalue so that scaling every covariance by a common factor
# scales the cost exactly.
REL_FLOOR = 1e-9


def _floored(S):
    tr = np.trace(S, axis1=-2, axis2=-1)[..., None, None]
    return S + (REL_FLOOR / 3.0) * tr * np.eye(S.shape[-1])


# ----------------------------------------------------------------------
# residual blocks

@dataclass
class ResidualBlock:
    """A batch of K residuals of size d.

    ``E0`` is the Jacobian w.r.t. state ``idx`` and ``E1`` (optional) w.r.t.
    state ``idx + 1``; both have shape (K, d, D).  ``W`` is the inverse
    Cholesky factor of ``Sigma`` so the whitened residual is ``W e``.
    ``mask`` (K,) gates rows to zero.  The ``d*`` dicts map a flat parameter
    index to the derivative of ``Sigma``, ``e`` and ``E0`` respectively; they
    are only filled when derivatives are requested.
    """

    name: str
    idx: np.ndarray
    e: np.ndarray
    W: np.ndarray
    E0: np.ndarray = None
    E1: np.ndarray = None
    mask: np.ndarray = None
    dSigma: dict = field(default_factory=dict)
    de: dict = field(default_factory=dict)
    dE0: dict = field(default_factory=dict)

    def whitened(self):
        r = np.einsum("...ij,...j->...i", self.W, self.e)
        if self.mask is not None:
            r = r * self.mask[:, None]
        return r

    def cost(self):
        r = self.whitened()
        return float(np.sum(r * r))

    def sigma_inv(self):
        return np.swapaxes(self.W, -1, -2) @ self.W


def whitening(S):
    """Inverse lower Cholesky factor of (a batch of) SPD matrices."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NotPD("covariance block is not positive definite") from None
    eye = np.broadcast_to(np.eye(S.shape[-1]), S.shape)
    return np.linalg.solve(L, eye)


def total_cost(blocks):
    return sum(b.cost() for b in blocks)


def _scatter_add(out, idx, vals):
    """``out[idx] += vals`` with a fast path for sorted, equally repeated
    indices (the layout every block in this module uses)."""
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    n = hi - lo
    if len(idx) % n == 0:
        m = len(idx) // n
        if np.array_equal(idx, np.repeat(np.arange(lo, hi), m)):
            out[lo:hi] += vals.reshape((n, m) + vals.shape[1:]).sum(axis=1)
            return
    np.add.at(out, idx, vals)


def _per_state(idx):
    """``(lo, m)`` if ``idx`` is ``repeat(arange(lo, hi), m)``, else None."""
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    n = hi - lo
    if len(idx) % n:
        return None
    m = len(idx) // n
    if not np.array_equal(idx, np.repeat(np.arange(lo, hi), m)):
        return None
    return lo, m


def assemble(blocks, n_states, dim, hessian=True):
    """Cost, gradient ``F`` (N, D) and Gauss-Newton matrix of ``J``.

    Whitened rows of all blocks touching the same run of states are stacked
    per state so each state costs one batched product.
    """
    g = np.zeros((n_states, dim))
    diag = np.zeros((n_states, dim, dim)) if hessian else None
    sub = np.zeros((max(n_states - 1, 0), dim, dim)) if hessian else None
    cost = 0.0
    groups = {}
    for b in blocks:
        r = b.whitened()
        cost += float(np.sum(r * r))
        m = None if b.mask is None else b.mask[:, None, None]
        A0 = b.W @ b.E0
        A1 = None if b.E1 is None else b.W @ b.E1
        if m is not None:
            A0 = A0 * m
            A1 = None if A1 is None else A1 * m
        layout = _per_state(b.idx) if hessian else None
        if not hessian:
            _scatter_add(g, b.idx, 2.0 * (np.swapaxes(A0, -1, -2) @ r[..., None])[..., 0])
            if A1 is not None:
                _scatter_add(g, b.idx + 1,
                             2.0 * (np.swapaxes(A1, -1, -2) @ r[..., None])[..., 0])
            continue
        if layout is None:
            A0T = np.swapaxes(A0, -1, -2)
            np.add.at(g, b.idx, 2.0 * (A0T @ r[..., None])[..., 0])
            if hessian:
                np.add.at(diag, b.idx, 2.0 * (A0T @ A0))
            if A1 is not None:
                A1T = np.swapaxes(A1, -1, -2)
                np.add.at(g, b.idx + 1, 2.0 * (A1T @ r[..., None])[..., 0])
                if hessian:
                    np.add.at(diag, b.idx + 1, 2.0 * (A1T @ A1))
                    np.add.at(sub, b.idx, 2.0 * (A1T @ A0))
            continue
        lo, reps = layout
        n = len(b.idx) // reps
        key = (lo, n, A1 is not None)
        d = r.shape[-1]
        item = (r.reshape(n, reps * d), A0.reshape(n, reps * d, dim),
                None if A1 is None else A1.reshape(n, reps * d, dim))
        groups.setdefault(key, []).append(item)
    for (lo, n, two), items in groups.items():
        r = np.concatenate([it[0] for it in items], axis=1)
        A0 = np.concatenate([it[1] for it in items], axis=1)
        A0T = np.swapaxes(A0, -1, -2)
        g[lo:lo + n] += 2.0 * (A0T @ r[..., None])[..., 0]
        if hessian:
            diag[lo:lo + n] += 2.0 * (A0T @ A0)
        if two:
            A1 = np.concatenate([it[2] for it in items], axis=1)
            A1T = np.swapaxes(A1, -1, -2)
            g[lo + 1:lo + n + 1] += 2.0 * (A1T @ r[..., None])[..., 0]
            if hessian:
                diag[lo + 1:lo + n + 1] += 2.0 * (A1T @ A1)
                sub[lo:lo + n] += 2.0 * (A1T @ A0)
    H = blocktri.BlockTridiagonal(diag, sub) if hessian else None
    return cost, g, H


# ----------------------------------------------------------------------
# legged-robot problem

def state_slices(n_feet):
    """Index slices of the tangent layout (rot, trans, vel, feet, ba, bg)."""
    f = 9 + 3 * n_feet
    return {"rot": slice(0, 3), "trans": slice(3, 6), "vel": slice(6, 9),
            "feet": slice(9, f), "ba": slice(f, f + 3), "bg": slice(f + 3, f + 6)}


class EstimationProblem:
    """Lower-level problem for one sensor log and one parameter vector.

    Parameters
    ----------
    robot : RobotKinematics
    log : SensorLog
    params : CalibrationParams
    x_prior : ManifoldState
        Mean of the prior on the first state; ``P0`` comes from ``params``.
    lower, upper : optional box bounds checked on construction.
    """

    def __init__(self, robot, log, params, x_prior, lower=None, upper=None):
        check_box(params.theta, lower, upper, params.layout)
        if params.layout.n_feet != robot.n_feet or log.n_legs != robot.n_feet:
            raise ValueError("robot, log and parameter layout disagree on n_feet")
        self.robot = robot
        self.log = log
        self.params = params
        self.x_prior = x_prior
        self.dt = float(log.dt)
        self.n_feet = robot.n_feet
        self.dim = tangent_dim(self.n_feet)
        self.sl = state_slices(self.n_feet)
        self._precompute()

    @property
    def n_states(self):
        return len(self.log)

    @property
    def horizon(self):
        return len(self.log) - 1

    def with_params(self, params):
        return EstimationProblem(self.robot, self.log, params, self.x_prior)

    # ------------------------------------------------------------------
    def _precompute(self):
        p, lg, dt = self.params, self.log, self.dt
        ch = self.robot.chain(lg.alpha, p.theta_foot, lg.alpha_dot)
        self.chain = ch
        self.R_alpha = p.cov("R_alpha")
        self.R_alphadot = p.cov("R_alphadot")
        self.Q = {name: p.cov(name) * dt ** DT_POWER[name] for name in DT_POWER}
        J = ch["J"]
        JT = np.swapaxes(J, -1, -2)
        self.Sigma_p = _floored(J @ self.R_alpha @ JT)
        _, G_v = _g_from_chain(ch, lg.gyro)
        self.G_v = G_v
        self.R_z = np.zeros((9, 9))
        self.R_z[:3, :3] = self.R_alpha
        self.R_z[3:6, 3:6] = self.R_alphadot
        self.R_z[6:, 6:] = p.cov("Q_w")
        self.Sigma_v = _floored(G_v @ self.R_z @ np.swapaxes(G_v, -1, -2))
        self.W_p = whitening(self.Sigma_p)
        self.W_v = whitening(self.Sigma_v)
        S_pose = np.zeros((6, 6))
        S_pose[:3, :3] = self.Q["Q_w"]
        S_pose[3:, 3:] = self.Q["Q_p"]
        self.Sigma_pose = S_pose
        self.W_proc = {"pose": whitening(S_pose)}
        for name, key in (("vel", "Q_a"), ("foot", "Q_foot"), ("ba", "Q_ba"), ("bg", "Q_bw")):
            self.W_proc[name] = whitening(self.Q[key])
        self.P0 = p.cov("P0")
        self.W_prior = whitening(self.P0)

    # ------------------------------------------------------------------
    def retract(self, X, tau):
        return X.boxplus(tau)

    def dead_reckoning(self):
        """Initial trajectory: IMU propagation from the prior mean, feet placed
        by forward kinematics at every step."""
        lg, n = self.log, self.n_states
        quat = np.empty((n, 4))
        pos = np.empty((n, 3))
        vel = np.empty((n, 3))
        x0 = self.x_prior
        quat[0] = x0.pose.rotation.q
        pos[0] = x0.pose.translation
        vel[0] = x0.velocity
        ba = np.broadcast_to(x0.accel_bias, (n, 3)).copy()
        bg = np.broadcast_to(x0.gyro_bias, (n, 3)).copy()
        g = self.robot.gravity
        for k in range(n - 1):
            q, p_, v = propagate_batch(quat[k:k + 1], pos[k:k + 1], vel[k:k + 1],
                                       ba[k:k + 1], bg[k:k + 1], lg.acc[k:k + 1],
                                       lg.gyro[k:k + 1], self.dt, g)
            quat[k + 1], pos[k + 1], vel[k + 1] = q[0], p_[0], v[0]
        R = quat_to_mat(quat)
        feet = pos[:, None, :] + np.einsum("nij,nfj->nfi", R, self.chain["p"])
        return Trajectory(quat, pos, vel, feet, ba, bg)

    # ------------------------------------------------------------------
    def linearize(self, X, jacobians=True, derivatives=False):
        """Residual blocks at trajectory ``X``.

        ``derivatives`` additionally fills the parameter derivatives used by
        the sensitivity module (implies ``jacobians``).
        """
        if len(X) != self.n_states:
            raise ValueError(f"trajectory has {len(X)} states, log has {self.n_states}")
        jacobians = jacobians or derivatives
        blocks = [self._prior_block(X, jacobians, derivatives)]
        if self.n_states > 1:
            blocks += self._process_blocks(X, jacobians, derivatives)
        blocks += self._measurement_blocks(X, jacobians, derivatives)
        return blocks

    def cost(self, X):
        return total_cost(self.linearize(X, jacobians=False))

    # prior ---------------------------------------------------------------
    def _prior_block(self, X, jac, der):
        x0 = X.state(0)
        xp = self.x_prior
        rel_q = quat_mul(x0.pose.rotation.q, quat_conj(xp.pose.rotation.q))
        rel_t = x0.pose.translation - quat_to_mat(rel_q) @ xp.pose.translation
        e_pose = se3_log_qt(rel_q, rel_t)
        e = np.concatenate([e_pose, x0.euclidean() - xp.euclidean()])[None]
        b = ResidualBlock("prior", np.zeros(1, dtype=int), e, self.W_prior[None])
        if jac:
            E = np.eye(self.dim)[None].copy()
            E[0, :6, :6] = se3_left_jacobian_inv(e_pose)
            b.E0 = E
        if der:
            self._cov_derivs(b, "P0", lambda dS: dS[None])
        return b

    def _cov_derivs(self, b, name, embed):
        sl = self.params.layout.slices[name]
        dS = self.params.cov_derivatives(name)
        for i, d in zip(range(sl.start, sl.stop), dS):
            b.dSigma[i] = embed(d)

    # process -------------------------------------------------------------
    def _process_blocks(self, X, jac, der):
        lg, dt, sl, nf = self.log, self.dt, self.sl, self.n_feet
        T = self.n_states - 1
        R = X.R
        Rk = R[:-1]
        ab = lg.acc[:-1] - X.ba[:-1]
        w = lg.gyro[:-1] - X.bg[:-1]
        Ra = np.einsum("kij,kj->ki", Rk, ab)
        aw = Ra + self.robot.gravity
        phi = w * dt
        qf = quat_mul(X.quat[:-1], zeta(phi))
        Rf = quat_to_mat(qf)
        pf = X.pos[:-1] + X.vel[:-1] * dt + 0.5 * aw * dt * dt
        vf = X.vel[:-1] + aw * dt
        qrel = quat_mul(X.quat[1:], quat_conj(qf))
        trel = X.pos[1:] - np.einsum("kij,kj->ki", quat_to_mat(qrel), pf)
        e_pose = se3_log_qt(qrel, trel)
        idx = np.arange(T)
        blocks = []

        b = ResidualBlock("process_pose", idx, e_pose, self.W_proc["pose"])
        if jac:
            D = self.dim
            eta = np.zeros((T, 6, D))
            eta[:, :3, sl["rot"]] = np.eye(3)
            eta[:, :3, sl["bg"]] = -Rf @ so3_right_jacobian(phi) * dt
            dp = np.zeros((T, 3, D))
            dp[:, :, sl["rot"]] = -skew(X.pos[:-1]) - 0.5 * dt * dt * skew(Ra)
            dp[:, :, sl["trans"]] = np.eye(3)
            dp[:, :, sl["vel"]] = dt * np.eye(3)
            dp[:, :, sl["ba"]] = -0.5 * dt * dt * Rk
            eta[:, 3:, :] = dp + skew(pf) @ eta[:, :3, :]
            b.E0 = -se3_right_jacobian_inv(e_pose) @ eta
            E1 = np.zeros((T, 6, D))
            E1[:, :, :6] = se3_left_jacobian_inv(e_pose)
            b.E1 = E1
        if der:
            sq = {"Q_w": (slice(0, 3), DT_POWER["Q_w"]), "Q_p": (slice(3, 6), DT_POWER["Q_p"])}
            for name, (s, pw) in sq.items():
                def embed(d, s=s, pw=pw):
                    out = np.zeros((6, 6))
                    out[s, s] = d * dt ** pw
                    return out
                self._cov_derivs(b, name, embed)
        blocks.append(b)

        b = ResidualBlock("process_vel", idx, X.vel[1:] - vf, self.W_proc["vel"])
        if jac:
            E0 = np.zeros((T, 3, self.dim))
            E0[:, :, sl["rot"]] = dt * skew(Ra)
            E0[:, :, sl["vel"]] = -np.eye(3)
            E0[:, :, sl["ba"]] = dt * Rk
            E1 = np.zeros((T, 3, self.dim))
            E1[:, :, sl["vel"]] = np.eye(3)
            b.E0, b.E1 = E0, E1
        if der:
            self._cov_derivs(b, "Q_a", lambda d: d * dt ** DT_POWER["Q_a"])
        blocks.append(b)

        # foot random walk, active only while the foot stays in contact
        c = lg.contact
        fmask = (c[:-1] & c[1:]).astype(float).reshape(-1)
        fidx = np.repeat(idx, nf)
        e_f = (X.feet[1:] - X.feet[:-1]).reshape(-1, 3)
        b = ResidualBlock("process_foot", fidx, e_f, self.W_proc["foot"], mask=fmask)
        if jac:
            K = T * nf
            E0 = np.zeros((K, 3, self.dim))
            leg = np.tile(np.arange(nf), T)
            cols = sl["feet"].start + 3 * leg[:, None] + np.arange(3)
            E0[np.arange(K)[:, None], np.arange(3), cols] = -1.0
            E1 = -E0
            b.E0, b.E1 = E0, E1
        if der:
            self._cov_derivs(b, "Q_foot", lambda d: d * dt ** DT_POWER["Q_foot"])
        blocks.append(b)

        for name, key, attr in (("process_ba", "Q_ba", "ba"), ("process_bg", "Q_bw", "bg")):
            arr = getattr(X, attr)
            b = ResidualBlock(name, idx, arr[1:] - arr[:-1], self.W_proc[attr])
            if jac:
                E0 = np.zeros((T, 3, self.dim))
                E0[:, :, sl[attr]] = -np.eye(3)
                b.E0, b.E1 = E0, -E0
            if der:
                self._cov_derivs(b, key, lambda d, k=key: d * dt ** DT_POWER[k])
            blocks.append(b)
        return blocks

    # measurements --------------------------------------------------------
    def _measurement_blocks(self, X, jac, der):
        lg, sl, nf, ch = self.log, self.sl, self.n_feet, self.chain
        N = self.n_states
        K = N * nf
        R = X.R
        RT = np.swapaxes(R, -1, -2)
        idx = np.repeat(np.arange(N), nf)
        leg = np.tile(np.arange(nf), N)
        fk = ch["p"]
        rel = X.feet - X.pos[:, None, :]
        e_p = np.einsum("nij,nfj->nfi", RT, rel) - fk
        w = lg.gyro - X.bg
        e_v = (np.einsum("nij,nj->ni", RT, X.vel)[:, None, :]
               + np.einsum("nfij,nfj->nfi", ch["J"], lg.alpha_dot)
               + np.cross(w[:, None, :], fk))
        bp = ResidualBlock("meas_pos", idx, e_p.reshape(K, 3), self.W_p.reshape(K, 3, 3))
        bv = ResidualBlock("meas_vel", idx, e_v.reshape(K, 3), self.W_v.reshape(K, 3, 3),
                           mask=lg.contact.reshape(K).astype(float))
        if jac:
            RTk = RT[idx]
            D = self.dim
            Ep = np.zeros((K, 3, D))
            Ep[:, :, sl["rot"]] = RTk @ skew(X.feet.reshape(K, 3))
            Ep[:, :, sl["trans"]] = -RTk
            cols = sl["feet"].start + 3 * leg[:, None] + np.arange(3)
            Ep[np.arange(K)[:, None, None], np.arange(3)[None, :, None],
               cols[:, None, :]] = RTk
            bp.E0 = Ep
            Ev = np.zeros((K, 3, D))
            Ev[:, :, sl["rot"]] = RTk @ skew(X.vel[idx])
            Ev[:, :, sl["vel"]] = RTk
            Ev[:, :, sl["bg"]] = skew(fk.reshape(K, 3))
            bv.E0 = Ev
        if der:
            self._measurement_derivatives(X, bp, bv)
        return [bp, bv]

    def _measurement_derivatives(self, X, bp, bv):
        lg, sl, nf, ch = self.log, self.sl, self.n_feet, self.chain
        N = self.n_states
        K = N * nf
        lay = self.params.layout
        J = ch["J"].reshape(K, 3, 3)
        JT = np.swapaxes(J, -1, -2)
        G = self.G_v.reshape(K, 3, 9)
        GT = np.swapaxes(G, -1, -2)
        # covariance blocks entering the induced measurement covariances
        for name, rz in (("R_alpha", slice(0, 3)), ("R_alphadot", slice(3, 6)),
                         ("Q_w", slice(6, 9))):
            s = lay.slices[name]
            for i, d in zip(range(s.start, s.stop), self.params.cov_derivatives(name)):
                dRz = np.zeros((9, 9))
                dRz[rz, rz] = d
                bv.dSigma[i] = _floored(G @ dRz @ GT)
                if name == "R_alpha":
                    bp.dSigma[i] = _floored(J @ d @ JT)
        # foot offsets: enter fk, J, Jdot and the gyro column of G_v
        dJ, dJd = self.robot.offset_derivatives(ch)
        R_BC = ch["R_BC"]
        w = lg.gyro - X.bg
        w3 = ch["w3"]
        Wm = skew(lg.gyro)
        s = lay.slices["theta_foot"]
        for j in range(nf):
            rows = np.arange(N) * nf + j
            for l in range(3):
                i = s.start + 3 * j + l
                col = R_BC[:, j, :, l]  # R_BC e_l, (N, 3)
                dJ_jl = dJ[:, j, l]
                dG = np.zeros((N, 3, 9))
                dG[:, :, :3] = dJd[:, j, l] + Wm @ dJ_jl
                dG[:, :, 3:6] = dJ_jl
                dG[:, :, 6:] = -skew(col)
                Gj = G[rows]
                dSv = dG @ self.R_z @ np.swapaxes(Gj, -1, -2)
                dSp = dJ_jl @ self.R_alpha @ JT[rows]
                full_v = np.zeros((K, 3, 3))
                full_v[rows] = dSv + np.swapaxes(dSv, -1, -2)
                full_p = np.zeros((K, 3, 3))
                full_p[rows] = dSp + np.swapaxes(dSp, -1, -2)
                bv.dSigma[i] = _floored(full_v)
                bp.dSigma[i] = _floored(full_p)
                de_p = np.zeros((K, 3))
                de_p[rows] = -col
                bp.de[i] = de_p
                de_v = np.zeros((K, 3))
                de_v[rows] = np.cross(w3[:, j] + w, col)
                bv.de[i] = de_v
                dE = np.zeros((K, 3, self.dim))
                dE[rows, :, sl["bg"]] = skew(col)
                bv.dE0[i] = dE


def prior_from_truth(truth_state):
    return truth_state


def prior_from_mocap(robot, log, theta_foot=None, theta_base=None):
    """Prior mean built from the first mocap sample: pose and velocity from
    mocap (marker offset ``theta_base`` removed when given), feet from
    forward kinematics, zero biases."""
    q = log.mocap_quat[0]
    R = quat_to_mat(q)
    p = log.mocap_pos[0]
    if theta_base is not None:
        p = p - R @ np.asarray(theta_base, dtype=float)
    fk = robot.chain(log.alpha[0], theta_foot)["p"]
    feet = p + fk @ R.T
    return ManifoldState(Pose(Rotation(q), p), log.mocap_vel[0], feet)


# ----------------------------------------------------------------------
# linear-Gaussian oracle problem

class LinearGaussianProblem:
    """Euclidean random walk ``x_{k+1} = x_k + w`` observed directly.

    The flat parameter vector holds the standard deviations ``(p0, q, r)``
    (isotropic).  Used as a closed-form oracle for the solver and the
    sensitivity module; with one state the MAP is
    ``(P^-1 + R^-1)^-1 (P^-1 mu + R^-1 y)``.
    """

    def __init__(self, mu, y, theta):
        self.mu = np.asarray(mu, dtype=float)
        self.y = np.atleast_2d(np.asarray(y, dtype=float))
        self.theta = np.asarray(theta, dtype=float)
        self.dim = self.mu.shape[0]
        self.n_states = self.y.shape[0]

    def with_theta(self, theta):
        return LinearGaussianProblem(self.mu, self.y, theta)

    def retract(self, X, tau):
        return X + tau

    def initial(self):
        return np.broadcast_to(self.mu, (self.n_states, self.dim)).copy()

    def linearize(self, X, jacobians=True, derivatives=False):
        d, N = self.dim, self.n_states
        eye = np.eye(d)
        s0, sq, sr = self.theta
        blocks = []
        b = ResidualBlock("prior", np.zeros(1, dtype=int), (X[0] - self.mu)[None],
                          (eye / s0)[None], E0=eye[None].copy())
        if derivatives:
            b.dSigma[0] = (2 * s0 * eye)[None]
        blocks.append(b)
        if N > 1:
            b = ResidualBlock("process", np.arange(N - 1), X[1:] - X[:-1], eye / sq,
                              E0=np.broadcast_to(-eye, (N - 1, d, d)).copy(),
                              E1=np.broadcast_to(eye, (N - 1, d, d)).copy())
            if derivatives:
                b.dSigma[1] = 2 * sq * eye
            blocks.append(b)
        b = ResidualBlock("meas", np.arange(N), X - self.y, eye / sr,
                          E0=np.broadcast_to(eye, (N, d, d)).copy())
        if derivatives:
            b.dSigma[2] = 2 * sr * eye
        blocks.append(b)
        return blocks

    def cost(self, X):
        return total_cost(self.linearize(X, jacobians=False))


# ----------------------------------------------------------------------
# solver

@dataclass
class EstimateResult:
    trajectory: object
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def kkt_residual(X, problem):
    """Tangent-space gradient ``F`` (N, D) of the cost and its inf-norm."""
    _, g, _ = assemble(problem.linearize(X), problem.n_states, problem.dim, hessian=False)
    return g, float(np.max(np.abs(g)))


def build_residuals(X, problem):
    """Stacked whitened residual vector and the list of blocks."""
    blocks = problem.linearize(X, jacobians=False)
    r = np.concatenate([b.whitened().ravel() for b in blocks])
    return r, blocks


def _gradient(problem, X):
    return assemble(problem.linearize(X), problem.n_states, problem.dim, hessian=False)[1]


def exact_hessian(X, problem, step=1e-6):
    """Block-tridiagonal Hessian of the cost by colored central differences."""
    N, D = problem.n_states, problem.dim
    diag = np.zeros((N, D, D))
    sub = np.zeros((max(N - 1, 0), D, D))
    for color in range(min(3, N)):
        ks = np.arange(color, N, 3)
        for i in range(D):
            tau = np.zeros((N, D))
            tau[ks, i] = step
            dg = (_gradient(problem, problem.retract(X, tau))
                  - _gradient(problem, problem.retract(X, -tau))) / (2.0 * step)
            diag[ks, :, i] = dg[ks]
            nxt = ks[ks + 1 < N]
            sub[nxt, :, i] = dg[nxt + 1]
    diag = 0.5 * (diag + np.swapaxes(diag, -1, -2))
    return blocktri.BlockTridiagonal(diag, sub)


def solve_fie(problem, init=None, max_iter=100, gtol=1e-8, ftol=0.0, xtol=1e-12,
              stall_gtol=1e-4, lam0=1e-6, lam_min=1e-12, lam_max=1e2, polish=0,
              callback=None):
    """Levenberg-Marquardt on the trajectory manifold.

    Damping is ``lam * diag(H)`` adapted by the gain ratio.  Stops when
    ``||F||_inf <= gtol`` or when an accepted step changes the cost by at
    most ``ftol`` relative.  Two extra exits handle the rounding floor of
    ``F`` (reached long before ``gtol`` when the weights are large): a step
    below ``xtol`` in every tangent coordinate, or a trial point whose cost
    differs only by rounding and whose gradient is no smaller even with the
    damping at ``lam_min``.  Trial points
    with a rounding-level cost change but a smaller gradient are accepted.
    If the damping saturates without any accepted step, the iterate counts
    as converged when ``||F||_inf <= stall_gtol``.

    With large weights the Gauss-Newton matrix is too inexact in the stiff
    directions to push ``F`` to its rounding floor.  ``polish`` then adds up
    to that many Newton steps with the exact Hessian, each kept only if it
    lowers ``||F||_inf``; use it where the solution must be accurate to
    first order in ``theta`` (finite-difference checks).
    Otherwise returns the best iterate with ``converged = False`` after
    ``max_iter`` iterations.
    """
    X = init
    if X is None:
        X = problem.dead_reckoning() if hasattr(problem, "dead_reckoning") else problem.initial()
    n, D = problem.n_states, problem.dim
    cost, g, H = assemble(problem.linearize(X), n, D)
    lam, nu = lam0, 2.0
    history = []
    converged = False
    it = 0
    gnorm = float(np.max(np.abs(g)))

    def record(accepted):
        rec = {"iteration": it, "cost": cost, "grad_norm": gnorm, "damping": lam,
               "accepted": accepted}
        history.append(rec)
        log.debug("fie %s", rec)
        if callback is not None:
            callback(rec)

    while it < max_iter:
        if gnorm <= gtol:
            converged = True
            break
        it += 1
        scale = np.maximum(np.diagonal(H.diag, axis1=1, axis2=2), 1e-12)
        try:
            fac = blocktri.cholesky(H.damped(lam, scale))
        except NotFactorizable:
            lam = min(lam * 10.0, lam_max)
            record(False)
            continue
        delta = -fac.solve(g)
        pred = -(np.sum(g * delta) + 0.5 * np.sum(delta * H.matvec(delta)))
        if float(np.max(np.abs(delta))) <= xtol and lam <= 1e-6:
            converged = True
            record(False)
            break
        Xn = problem.retract(X, delta)
        cost_n = problem.cost(Xn)
        rho = (cost - cost_n) / pred if pred > 0 else -1.0
        if cost_n <= cost and rho > 0:
            decrease = cost - cost_n
            X = Xn
            cost, g, H = assemble(problem.linearize(X), n, D)
            gnorm = float(np.max(np.abs(g)))
            lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), lam_min)
            nu = 2.0
            record(True)
            if decrease <= ftol * cost:
                converged = True
                break
            continue
        if abs(cost_n - cost) <= 1e-13 * abs(cost):
            # cost comparison is pure rounding: decide on the gradient instead
            cost_p, g_p, H_p = assemble(problem.linearize(Xn), n, D)
            gnorm_p = float(np.max(np.abs(g_p)))
            if gnorm_p < gnorm:
                X, cost, g, H, gnorm = Xn, cost_p, g_p, H_p, gnorm_p
                record(True)
                continue
            if lam > lam_min:
                # retry with an undamped step before declaring the floor
                lam = lam_min
                record(False)
                continue
            converged = True
            record(False)
            break
        lam = min(lam * nu, lam_max)
        nu *= 2.0
        record(False)
        if lam >= lam_max and nu > 2.0 ** 8:
            # no measurable descent even for tiny steps: rounding floor
            converged = gnorm <= stall_gtol
            break
    if not converged and gnorm <= gtol:
        converged = True
    if converged and hasattr(problem, "retract"):
        for _ in range(polish):
            if gnorm <= gtol:
                break
            try:
                fac = blocktri.cholesky(exact_hessian(X, problem))
            except NotFactorizable:
                break
            Xn = problem.retract(X, -fac.solve(g))
            cost_p, g_p, H_p = assemble(problem.linearize(Xn), n, D)
            gnorm_p = float(np.max(np.abs(g_p)))
            if gnorm_p >= gnorm:
                break
            X, cost, g, H, gnorm = Xn, cost_p, g_p, H_p, gnorm_p
            it += 1
            record(True)
    return EstimateResult(X, cost, gnorm, it, converged, history)
