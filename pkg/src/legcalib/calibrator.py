"""Upper-level calibration: trajectory loss, its gradient through the MAP
estimate, and a trust-region Frank-Wolfe loop over the box-constrained
parameter vector.

The loss compares the estimated base pose and velocity with motion capture::

    L = 1/2 sum_k ( |log(T_k T_gt,k^-1)|^2 + |v_k - v_gt,k|^2 )

where ``T_gt = (R_m, p_m - R_m theta_base)`` removes the marker offset.
Feet and biases are not observed by motion capture and do not enter ``L``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (LengthMismatch, LineSearchExhausted, MaxIterations, NotFactorizable,
                     NotPD)
from .estimator import EstimationProblem, prior_from_mocap, solve_fie
from .manifold import (quat_conj, quat_mul, quat_to_mat, se3_left_jacobian_inv,
                       se3_log_qt, se3_right_jacobian_inv)
from .params import COV_BLOCKS, check_box
from .sensitivity import sensitivity

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# loss

def _pose_error(X, log_, theta_base):
    if len(X) != len(log_):
        raise LengthMismatch(f"trajectory has {len(X)} states, ground truth {len(log_)}")
    Rm = quat_to_mat(log_.mocap_quat)
    p_gt = log_.mocap_pos - Rm @ np.asarray(theta_base, dtype=float)
    qrel = quat_mul(X.quat, quat_conj(log_.mocap_quat))
    trel = X.pos - np.einsum("nij,nj->ni", quat_to_mat(qrel), p_gt)
    return se3_log_qt(qrel, trel), Rm


def upper_loss(X, gt, theta_base):
    """Half squared pose and velocity error against motion capture.

    Parameters
    ----------
    X : Trajectory
        Estimated trajectory.
    gt : SensorLog
        Log holding the motion-capture channels, aligned with ``X``.
    theta_base : (3,) array
        Base-to-marker offset in the body frame.

    Raises
    ------
    LengthMismatch
        ``X`` and ``gt`` differ in length.
    """
    e, _ = _pose_error(X, gt, theta_base)
    dv = X.vel - gt.mocap_vel
    return 0.5 * float(np.sum(e * e) + np.sum(dv * dv))


def loss_state_gradient(X, gt, theta_base):
    """``dL/dx`` in left tangent coordinates, shape (N, D), and the explicit
    derivative with respect to ``theta_base``."""
    e, Rm = _pose_error(X, gt, theta_base)
    dLdx = np.zeros((len(X), X.dim))
    dLdx[:, :6] = np.einsum("ni,nij->nj", e, se3_left_jacobian_inv(e))
    dLdx[:, 6:9] = X.vel - gt.mocap_vel
    # theta_base moves the ground-truth translation by -R_m dtheta, i.e. a
    # right perturbation (0, R_m dtheta) of T T_gt^-1
    Jr = se3_right_jacobian_inv(e)[:, :, 3:]
    dLdb = np.einsum("ni,nij,njk->k", e, Jr, Rm)
    return dLdx, dLdb


# ----------------------------------------------------------------------
# lower level wrapped as a function of theta

@dataclass
class SolverOptions:
    max_iter: int = 100
    gtol: float = 1e-8
    ftol: float = 0.0
    xtol: float = 1e-12
    stall_gtol: float = 1e-4
    polish: int = 0


class BilevelObjective:
    """Loss and gradient of the upper level as functions of ``theta``.

    The arrival prior ``x_prior`` is held fixed so that it does not depend
    on ``theta``.  Solves are warm-started from the first-order prediction
    of the last gradient evaluation (or the last converged trajectory).

    Parameters
    ----------
    robot : RobotKinematics
    log_ : SensorLog
        Proprioceptive data and motion capture.
    layout : ParamLayout
    x_prior : ManifoldState, optional
        Defaults to the first mocap sample with zero offsets.
    solver : SolverOptions, optional
    hessian : {"exact", "gn"}
        Matrix used in the implicit differentiation.
    """

    def __init__(self, robot, log_, layout, x_prior=None, solver=None, hessian="exact"):
        self.robot = robot
        self.log = log_
        self.layout = layout
        self.x_prior = x_prior if x_prior is not None else prior_from_mocap(robot, log_)
        self.solver = solver or SolverOptions()
        self.hessian = hessian
        self._warm = None
        self._tangent = None
        self._last = None
        self.n_solves = 0

    def problem(self, params):
        return EstimationProblem(self.robot, self.log, params, self.x_prior)

    def predict(self, params):
        """First-order prediction ``X(theta_ref) [+] Z (theta - theta_ref)`` from
        the last gradient evaluation, or the last converged trajectory."""
        if self._tangent is None:
            return self._warm
        theta_ref, X_ref, Z = self._tangent
        return X_ref.boxplus(Z @ (params.theta - theta_ref))

    def solve(self, params, init=None):
        """Lower-level solve; repeated calls at the same ``theta`` (without an
        explicit ``init``) return the cached result."""
        if init is None and self._last is not None and np.array_equal(self._last[0], params.theta):
            return self._last[1], self._last[2]
        prob = self.problem(params)
        init = init if init is not None else self.predict(params)
        res = solve_fie(prob, init, **asdict(self.solver))
        self.n_solves += 1
        if res.converged:
            self._warm = res.trajectory
        self._last = (params.theta.copy(), prob, res)
        return prob, res

    def loss(self, params, init=None):
        """Loss at ``params``; ``inf`` when the lower level does not converge."""
        _, res = self.solve(params, init)
        if not res.converged:
            return np.inf, res
        return upper_loss(res.trajectory, self.log, params.theta_base), res

    def gradient(self, params, init=None, corrupt=0.0):
        """Loss, gradient and the lower-level result at ``params``.

        ``corrupt`` scales the sensitivity matrix by ``1 + corrupt``; it only
        exists as a negative control for gradient checks.

        Raises
        ------
        MaxIterations
            The lower-level solve did not converge.
        """
        prob, res = self.solve(params, init)
        if not res.converged:
            raise MaxIterations(f"lower-level solve did not converge in {res.iterations} "
                                f"iterations (|F| = {res.grad_norm:.3e})")
        X = res.trajectory
        Z, _ = sensitivity(X, prob, hessian=self.hessian)
        self._tangent = (params.theta.copy(), X, Z)
        if corrupt:
            Z = Z * (1.0 + corrupt)
        dLdx, dLdb = loss_state_gradient(X, self.log, params.theta_base)
        grad = np.einsum("nd,ndm->m", dLdx, Z)
        grad[self.layout.slices["theta_base"]] += dLdb
        return upper_loss(X, self.log, params.theta_base), grad, res


def loss_gradient(params, objective):
    """``grad_theta L`` at ``params`` (solves the lower level first)."""
    return objective.gradient(params)[1]


def fd_gradient(params, objective, eps=1e-5, indices=None):
    """Full-pipeline central differences of the loss, re-solving each probe
    from the solution at ``params``."""
    _, res0 = objective.solve(params)
    X0 = res0.trajectory
    idx = range(params.layout.size) if indices is None else indices
    out = np.zeros(len(idx))
    for i, j in enumerate(idx):
        vals = []
        for sgn in (1.0, -1.0):
            th = params.theta.copy()
            th[j] += sgn * eps
            val, _ = objective.loss(params.with_theta(th), init=X0)
            vals.append(val)
        out[i] = (vals[0] - vals[1]) / (2.0 * eps)
    return out


# ----------------------------------------------------------------------
# Frank-Wolfe pieces

def lmo(grad, theta, lower, upper, delta):
    """Minimizer of ``s . grad`` over ``box(lower, upper)`` intersected with
    the cube ``|s - theta|_inf <= delta`` (``delta`` scalar or elementwise).
    Zero gradient entries stay at ``theta``."""
    grad = np.asarray(grad, dtype=float)
    theta = np.asarray(theta, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), theta.shape)
    lo = np.maximum(lower, theta - delta)
    hi = np.minimum(upper, theta + delta)
    return np.where(grad > 0, lo, np.where(grad < 0, hi, theta))


def step_point(theta, s, gamma, lower, upper):
    """``theta + gamma (s - theta)``; exact endpoint for ``gamma = 1`` and
    clipped so rounding cannot leave the box."""
    if gamma == 1.0:
        return s.copy()
    return np.clip(theta + gamma * (s - theta), lower, upper)


@dataclass
class ArmijoResult:
    gamma: float
    loss: float
    trials: int
    descent: bool
    payload: object = None


def armijo_search(loss_fn, theta, s, grad, loss0, rho=1e-4, beta=0.5, k_max=30,
                  lower=None, upper=None):
    """Backtracking on ``gamma in {1, beta, ..., beta^k_max}``.

    ``loss_fn(theta) -> (loss, payload)``.  Returns ``gamma = 0`` with
    ``descent = False`` if ``grad . (s - theta) >= 0``.

    Raises
    ------
    LineSearchExhausted
        No trial satisfied the sufficient-decrease condition.
    """
    d = s - theta
    slope = float(grad @ d)
    if not slope < 0:
        return ArmijoResult(0.0, loss0, 0, False)
    lower = -np.inf if lower is None else lower
    upper = np.inf if upper is None else upper
    gamma = 1.0
    for k in range(k_max + 1):
        val, payload = loss_fn(step_point(theta, s, gamma, lower, upper))
        if val <= loss0 + rho * gamma * slope:
            return ArmijoResult(gamma, val, k + 1, True, payload)
        gamma *= beta
    raise LineSearchExhausted(f"no sufficient decrease after {k_max} halvings")


# ----------------------------------------------------------------------
# trace

@dataclass
class CalibrationTrace:
    """Append-only per-iteration record of the Frank-Wolfe loop."""

    names: list
    rows: list = field(default_factory=list)

    def append(self, **rec):
        self.rows.append(rec)

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.rows])

    @property
    def grad_norms(self):
        return np.array([r["grad_norm"] for r in self.rows])

    @property
    def thetas(self):
        return np.array([r["theta"] for r in self.rows])

    COLUMNS = ("iteration", "loss", "grad_norm", "gamma", "gap", "local_gap", "radius",
               "trials", "status")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.COLUMNS) + list(self.names))
            for r in self.rows:
                w.writerow([_cell(r[c]) for c in self.COLUMNS]
                           + ["%.17g" % v for v in r["theta"]])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            k = len(cls.COLUMNS)
            tr = cls(header[k:])
            for row in rd:
                rec = {}
                for c, v in zip(cls.COLUMNS, row[:k]):
                    rec[c] = v if c == "status" else (int(v) if c in ("iteration", "trials")
                                                      else float(v))
                rec["theta"] = np.array([float(v) for v in row[k:]])
                tr.rows.append(rec)
        return tr


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


@dataclass
class CalibrationConfig:
    t_max: int = 50
    rho: float = 1e-4
    beta: float = 0.5
    k_max: int = 30
    gap_tol: float = 1e-8
    grad_tol: float = 0.0
    radius_rule: str = "sign"
    radius_floor: float = 1e-3
    debug: bool = False
    seed: int = 0


@dataclass
class CalibrationResult:
    theta: np.ndarray
    loss: float
    trace: CalibrationTrace
    converged: bool
    reason: str


def check_feasible(theta, fs, layout):
    """Box bounds and PD of every covariance block (raises on violation)."""
    check_box(theta, fs.lower, fs.upper, layout)
    for name in COV_BLOCKS:
        L = layout.factor(theta, name)
        try:
            np.linalg.cholesky(L @ L.T)
        except np.linalg.LinAlgError:
            raise NotPD(f"block {name} is not positive definite") from None


def calibrate(objective, params0, fs, config=None):
    """Trust-region Frank-Wolfe with Armijo steps.

    Each iteration solves the lower level at ``theta_t``, differentiates the
    loss through it, takes the LMO vertex ``s*`` of ``C_t`` and moves to
    ``theta_t + gamma (s* - theta_t)``.  The radius shrinks by ``fs.shrink``
    when the line search is exhausted and grows by ``fs.grow`` (capped at
    ``fs.delta_max``) after a full step.  ``radius_rule`` adds one
    contraction on top of that schedule: ``"sign"`` halves (``fs.shrink``)
    the radius of every coordinate whose gradient changed sign since the
    last accepted step, ``"step"`` contracts all radii to the accepted
    step ``gamma`` (at most by ``radius_floor``), ``"schedule"`` adds
    nothing.  The radius recorded in the trace is the largest relative
    radius over the coordinates.

    Stops when the Frank-Wolfe gap over the whole box,
    ``max_s grad . (theta_t - s)``, is at most ``gap_tol (1 + |L|)`` (the
    gap over the trust region shrinks with the radius and is only
    recorded), when ``|grad| <= grad_tol``, when no descent
    direction exists, or after ``t_max`` iterations.  Returns the best
    iterate; lower-level failures end the loop and are recorded.
    """
    cfg = config or CalibrationConfig()
    layout = params0.layout
    theta = params0.theta.copy()
    check_feasible(theta, fs, layout)
    delta0 = fs.delta.copy()
    if cfg.radius_rule not in ("sign", "step", "schedule"):
        raise ValueError(f"unknown radius rule '{cfg.radius_rule}'")
    scale = np.ones_like(theta)
    free = delta0 > 0
    scale_cap = np.where(free, fs.delta_max / np.where(free, delta0, 1.0), 1.0)
    prev_grad = None
    cached = None
    trace = CalibrationTrace(layout.names())
    rng = np.random.default_rng(cfg.seed)
    best = (np.inf, theta.copy())
    reason = "t_max"
    converged = False

    def eval_loss(th):
        val, res = objective.loss(params0.with_theta(th))
        return val, res

    t = 0
    while True:
        try:
            if cached is None or not np.array_equal(cached[0], theta):
                loss_t, grad, _ = objective.gradient(params0.with_theta(theta))
                cached = (theta.copy(), loss_t, grad)
            _, loss_t, grad = cached
        except (MaxIterations, NotPD, NotFactorizable) as exc:
            trace.append(iteration=t, loss=np.nan, grad_norm=np.nan, gamma=0.0, gap=np.nan,
                         local_gap=np.nan,
                         radius=float(np.max(scale)), trials=0, status=f"failed: {type(exc).__name__}",
                         theta=theta.copy())
            reason = f"lower-level failure: {exc}"
            break
        if loss_t < best[0]:
            best = (loss_t, theta.copy())
        if cfg.radius_rule == "sign" and prev_grad is not None:
            scale = np.where(grad * prev_grad < 0, scale * fs.shrink, scale)
        prev_grad = grad
        radius = float(np.max(scale[free])) if np.any(free) else 0.0
        gnorm = float(np.linalg.norm(grad))
        delta = np.minimum(scale * delta0, fs.delta_max)
        s = lmo(grad, theta, fs.lower, fs.upper, delta)
        local_gap = float(grad @ (theta - s))
        gap = float(grad @ (theta - lmo(grad, theta, fs.lower, fs.upper, np.inf)))
        rec = dict(iteration=t, loss=loss_t, grad_norm=gnorm, gap=gap, local_gap=local_gap,
                   radius=radius, theta=theta.copy())
        if gap <= cfg.gap_tol * (1.0 + abs(loss_t)) or gnorm <= cfg.grad_tol:
            trace.append(gamma=0.0, trials=0, status="converged", **rec)
            reason, converged = "gap below tolerance", True
            break
        if t >= cfg.t_max:
            trace.append(gamma=0.0, trials=0, status="t_max", **rec)
            break
        if cfg.debug:
            for lam in rng.uniform(0.0, 1.0, 10):
                check_feasible(step_point(theta, s, lam, fs.lower, fs.upper), fs, layout)
        try:
            ls = armijo_search(eval_loss, theta, s, grad, loss_t, cfg.rho, cfg.beta,
                               cfg.k_max, fs.lower, fs.upper)
        except LineSearchExhausted:
            trace.append(gamma=0.0, trials=cfg.k_max + 1, status="shrink", **rec)
            scale = scale * fs.shrink
            t += 1
            continue
        if not ls.descent:
            trace.append(gamma=0.0, trials=0, status="no descent", **rec)
            reason, converged = "no descent direction", True
            break
        trace.append(gamma=ls.gamma, trials=ls.trials, status="step", **rec)
        log.info("fw %d loss %.6e |g| %.3e gap %.3e gamma %.3g radius %.3g",
                 t, loss_t, gnorm, gap, ls.gamma, radius)
        theta = step_point(theta, s, ls.gamma, fs.lower, fs.upper)
        check_feasible(theta, fs, layout)
        if ls.gamma == 1.0:
            scale = np.minimum(scale * fs.grow, scale_cap)
        elif cfg.radius_rule == "step":
            scale = scale * max(ls.gamma, cfg.radius_floor)
        t += 1
    return CalibrationResult(best[1], best[0], trace, converged, reason)
