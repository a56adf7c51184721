"""Command-line front end.

Subcommands::

    generate   synthetic log(s) with ground truth
    estimate   MAP trajectory for one log and one parameter vector
    calibrate  bi-level calibration of the parameter vector
    gradcheck  analytic loss gradient against full-pipeline differences
    evaluate   estimate on held-out log(s) with a calibrated vector

Exit codes: 0 success, 2 configuration or I/O error, 3 solver did not
converge, 4 verification failed.  The log level comes from ``--verbose``
(repeatable) or the ``CALIB_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .calibrator import (BilevelObjective, CalibrationConfig, SolverOptions, calibrate,
                         fd_gradient, upper_loss)
from .datagen import GaitScript, default_stds, generate_trajectory, synthesize_sensors
from .errors import CalibError, MaxIterations, NotFactorizable, NotPD
from .estimator import EstimationProblem, prior_from_mocap, solve_fie
from .logfile import export_log, import_log
from .manifold import quat_conj, quat_mul, so3_log
from .params import CalibrationParams, FeasibleSet, ParamLayout
from .robot import RobotKinematics, load_robot

log = logging.getLogger("legcalib")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4

DATA_DIR = Path(__file__).parent / "data"
THETA_SCHEMA_VERSION = 1


class CliError(Exception):
    """Error carrying the process exit code."""

    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class RunConfig:
    """Resolved command line of one run."""

    subcommand: str
    robot: Path | None = None
    data: tuple = ()
    config: Path | None = None
    theta: Path | None = None
    baseline: Path | None = None
    out: Path = Path(".")
    seed: int = 0
    jobs: int = 1
    verbosity: int = 0
    corrupt: float = 0.0

    @classmethod
    def from_args(cls, args):
        def path(p):
            return None if p is None else Path(p)

        return cls(args.command, path(args.robot), tuple(Path(d) for d in args.data or ()),
                   path(args.config), path(getattr(args, "theta", None)),
                   path(getattr(args, "baseline", None)), Path(args.out), args.seed,
                   args.jobs, args.verbose, getattr(args, "corrupt_sensitivity", 0.0))

    def check_paths(self):
        """Every referenced input file must exist before compute starts."""
        for p in (self.robot, self.config, self.theta, self.baseline, *self.data):
            if p is not None and not p.is_file():
                raise CliError(f"file not found: {p}")


def _read_yaml(path):
    try:
        with Path(path).open() as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise CliError(f"cannot parse {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a mapping at top level")
    return doc


def load_config(path, default_name):
    """YAML config merged over the packaged default of the same kind."""
    cfg = _read_yaml(DATA_DIR / default_name)
    if path is not None:
        _merge(cfg, _read_yaml(path))
    return cfg


def _merge(base, over):
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val)
        else:
            base[key] = val
    return base


def load_robot_file(path):
    if path is None:
        return RobotKinematics.default()
    try:
        return load_robot(path)
    except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot load robot file {path}: {exc}") from None


def load_log_file(path, robot):
    try:
        lg, truth = import_log(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    except CalibError as exc:
        raise CliError(f"{path}: {exc}") from None
    if lg.robot_hash not in ("", "-") and lg.robot_hash != robot.hash():
        raise CliError(f"{path}: recorded robot hash {lg.robot_hash} does not match "
                       f"robot {robot.hash()}")
    if lg.n_legs != robot.n_feet:
        raise CliError(f"{path}: log has {lg.n_legs} legs, robot has {robot.n_feet}")
    return lg, truth


# ----------------------------------------------------------------------
# parameter files

def save_theta(path, params):
    """JSON with the flat vector, entry names and the ordering hash."""
    lay = params.layout
    doc = {
        "schema_version": THETA_SCHEMA_VERSION,
        "schema_hash": lay.schema_hash(),
        "n_feet": lay.n_feet,
        "modes": [list(m) for m in lay.modes],
        "names": lay.names(),
        "theta": [float(v) for v in params.theta],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_theta(path, layout=None):
    """Inverse of :func:`save_theta`; rejects files whose ordering hash
    differs from ``layout`` (when given)."""
    try:
        doc = json.loads(Path(path).read_text())
        lay = ParamLayout(int(doc["n_feet"]), tuple(tuple(m) for m in doc.get("modes", [])))
        theta = np.array(doc["theta"], dtype=float)
        stored = doc["schema_hash"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot load parameter file {path}: {exc}") from None
    if stored != lay.schema_hash() or (layout is not None and stored != layout.schema_hash()):
        raise CliError(f"{path}: parameter ordering hash {stored} does not match")
    try:
        return CalibrationParams(theta, lay)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def initial_params(cfg, n_feet):
    """Starting vector from the ``initial`` section of a calibration config.

    ``stds`` overrides per-block standard deviations, ``cov_scale`` multiplies
    them (scalar or per block), ``theta_foot``/``theta_base`` set offsets.
    """
    init = cfg.get("initial", {}) or {}
    stds = default_stds(float(init.get("sigma_alpha", 1e-3)))
    stds.update(init.get("stds") or {})
    scale = init.get("cov_scale", 1.0)
    for name in stds:
        k = scale.get(name, 1.0) if isinstance(scale, dict) else scale
        stds[name] = np.asarray(stds[name], dtype=float) * float(k)
    tf = np.broadcast_to(np.asarray(init.get("theta_foot", [0.0, 0.0, 0.0]), float),
                         (n_feet, 3))
    tb = np.asarray(init.get("theta_base", [0.0, 0.0, 0.0]), float)
    try:
        return CalibrationParams.from_stds(stds, tf, tb, ParamLayout(n_feet))
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid initial parameters: {exc}") from None


def _params_for(rc, cfg, robot):
    if rc.theta is not None:
        params = load_theta(rc.theta)
        if params.layout.n_feet != robot.n_feet:
            raise CliError(f"{rc.theta}: layout has {params.layout.n_feet} feet, "
                           f"robot has {robot.n_feet}")
        return params
    return initial_params(cfg, robot.n_feet)


def make_prior(cfg, robot, lg, truth, params):
    """Fixed arrival prior: the true first state of a synthetic log, or the
    first mocap sample with the offsets of ``params``."""
    kind = cfg.get("prior", "auto")
    if kind not in ("auto", "truth", "mocap"):
        raise CliError(f"unknown prior '{kind}'")
    if kind == "truth" and truth is None:
        raise CliError("prior 'truth' needs a log with ground truth")
    if kind != "mocap" and truth is not None:
        return truth.trajectory.state(0)
    return prior_from_mocap(robot, lg, params.theta_foot, params.theta_base)


def _solver_options(cfg):
    try:
        return SolverOptions(**(cfg.get("solver") or {}))
    except TypeError as exc:
        raise CliError(f"invalid solver section: {exc}") from None


# ----------------------------------------------------------------------
# metrics

def rmse_velocity(v_est, v_ref):
    """Root mean square of the per-sample velocity error norm."""
    d = np.asarray(v_est, float) - np.asarray(v_ref, float)
    if d.shape[0] == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def rmse_rotation(q_est, q_ref):
    """Root mean square of ``|log(R_est R_ref^T)|`` in rad."""
    q_est = np.asarray(q_est, float)
    if q_est.shape[0] == 0:
        return 0.0
    phi = so3_log(quat_mul(q_est, quat_conj(np.asarray(q_ref, float))))
    return float(np.sqrt(np.mean(np.sum(phi * phi, axis=-1))))


@dataclass
class MetricsReport:
    """Accuracy, parameter error and cost of one run."""

    rmse_v: float
    rmse_euler: float
    converged: bool
    wall_clock: float = 0.0
    iterations: dict = field(default_factory=dict)
    theta_error: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.rmse_v >= 0 and self.rmse_euler >= 0):
            raise ValueError("RMSEs must be non-negative")

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())


def trajectory_metrics(X, lg, truth):
    """RMSE of velocity and attitude against truth (or mocap without it)."""
    if truth is not None:
        q_ref, v_ref = truth.trajectory.quat, truth.trajectory.vel
    else:
        q_ref, v_ref = lg.mocap_quat, lg.mocap_vel
    return rmse_velocity(X.vel, v_ref), rmse_rotation(X.quat, q_ref)


def theta_error(params, truth):
    """Absolute error of every named entry against the generating vector."""
    if truth is None or truth.theta.size != params.theta.size:
        return None
    err = np.abs(params.theta - truth.theta)
    sl = params.layout.slices
    return {
        "theta_foot_max": float(np.max(err[sl["theta_foot"]])),
        "theta_base_max": float(np.max(err[sl["theta_base"]])),
        "entries": dict(zip(params.layout.names(), (float(e) for e in err))),
    }


def write_trajectory(path, X, dt):
    nf = X.n_feet
    header = (["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"]
              + [f"foot{j}_{c}" for j in range(nf) for c in "xyz"]
              + ["bax", "bay", "baz", "bgx", "bgy", "bgz"])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(X)):
            row = np.concatenate([[k * dt], X.quat[k], X.pos[k], X.vel[k],
                                  X.feet[k].ravel(), X.ba[k], X.bg[k]])
            w.writerow(["%.17g" % v for v in row])


# ----------------------------------------------------------------------
# subcommands

def cmd_generate(rc):
    """Write ``train.log`` (and ``heldout.log`` when the config asks for a
    held-out segment) with embedded ground truth; returns the manifest."""
    robot = load_robot_file(rc.robot)
    cfg = load_config(rc.config, "generate.yaml")
    try:
        base = GaitScript.from_dict(cfg.get("script") or {})
        heldout = float(cfg.get("heldout", 0.0))
        script = GaitScript.from_dict({**base.to_dict(), "duration": base.duration + heldout})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid script: {exc}") from None
    tcfg = cfg.get("truth") or {}
    stds = default_stds(float(tcfg.get("sigma_alpha", 1e-3)))
    stds.update(tcfg.get("stds") or {})
    tf = np.broadcast_to(np.asarray(tcfg.get("theta_foot", [0.01, -0.005, 0.02]), float),
                         (robot.n_feet, 3))
    params = CalibrationParams.from_stds(stds, tf, tcfg.get("theta_base", [0.05, 0.02, 0.03]),
                                         ParamLayout(robot.n_feet))
    gt = generate_trajectory(script, robot, params.theta_foot)
    lg, truth = synthesize_sensors(gt, robot, params, seed=rc.seed,
                                   noise_scale=float(cfg.get("noise_scale", 1.0)))
    rc.out.mkdir(parents=True, exist_ok=True)
    n_train = base.n_steps + 1
    parts = [("train.log", 0, n_train)]
    if heldout > 0:
        parts.append(("heldout.log", n_train - 1, len(lg)))
    manifest = []
    for name, a, b in parts:
        path = rc.out / name
        export_log(path, lg.slice(a, b), truth.slice(a, b))
        manifest.append(str(path))
    save_theta(rc.out / "truth_theta.json", params)
    manifest.append(str(rc.out / "truth_theta.json"))
    for p in manifest:
        print(p)
    return EXIT_OK


def _estimate_one(rc, cfg, robot, params, path):
    lg, truth = load_log_file(path, robot)
    prior = make_prior(cfg, robot, lg, truth, params)
    try:
        prob = EstimationProblem(robot, lg, params, prior)
    except CalibError as exc:
        raise CliError(f"invalid parameter vector: {exc}") from None
    t0 = time.perf_counter()
    res = solve_fie(prob, **asdict(_solver_options(cfg)))
    rv, re = trajectory_metrics(res.trajectory, lg, truth)
    rep = MetricsReport(rv, re, bool(res.converged), time.perf_counter() - t0,
                        {"lower": int(res.iterations)}, theta_error(params, truth),
                        {"cost": float(res.cost), "grad_norm": float(res.grad_norm),
                         "loss": float(upper_loss(res.trajectory, lg, params.theta_base))})
    return res, lg, rep


def cmd_estimate(rc):
    robot = load_robot_file(rc.robot)
    cfg = load_config(rc.config, "calibrate.yaml")
    params = _params_for(rc, cfg, robot)
    if len(rc.data) != 1:
        raise CliError("estimate needs exactly one --data log")
    res, lg, rep = _estimate_one(rc, cfg, robot, params, rc.data[0])
    rc.out.mkdir(parents=True, exist_ok=True)
    write_trajectory(rc.out / "trajectory.csv", res.trajectory, lg.dt)
    rep.write(rc.out / "metrics.json")
    log.info("RMSE_v %.6g m/s  RMSE_Euler %.6g rad  converged %s", rep.rmse_v,
             rep.rmse_euler, rep.converged)
    return EXIT_OK if rep.converged else EXIT_SOLVER


def cmd_evaluate(rc):
    """Estimate every ``--data`` log with ``--theta`` (and ``--baseline``
    when given, reporting the relative RMSE improvement)."""
    robot = load_robot_file(rc.robot)
    cfg = load_config(rc.config, "calibrate.yaml")
    if rc.theta is None:
        raise CliError("evaluate needs --theta")
    if not rc.data:
        raise CliError("evaluate needs at least one --data log")
    params = _params_for(rc, cfg, robot)
    base = load_theta(rc.baseline, params.layout) if rc.baseline is not None else None
    rc.out.mkdir(parents=True, exist_ok=True)
    summary = {}
    ok = True
    for path in rc.data:
        _, _, rep = _estimate_one(rc, cfg, robot, params, path)
        ok &= rep.converged
        entry = {"calibrated": asdict(rep)}
        if base is not None:
            _, _, brep = _estimate_one(rc, cfg, robot, base, path)
            ok &= brep.converged
            entry["baseline"] = asdict(brep)
            entry["improvement_v"] = _improvement(brep.rmse_v, rep.rmse_v)
            entry["improvement_euler"] = _improvement(brep.rmse_euler, rep.rmse_euler)
        summary[path.name] = entry
        log.info("%s: RMSE_v %.6g RMSE_Euler %.6g", path.name, rep.rmse_v, rep.rmse_euler)
    (rc.out / "evaluation.json").write_text(json.dumps(summary, indent=1, sort_keys=True)
                                            + "\n")
    return EXIT_OK if ok else EXIT_SOLVER


def _improvement(before, after):
    return float(1.0 - after / before) if before > 0 else 0.0


def _feasible_set(cfg, params):
    b = dict(cfg.get("bounds") or {})
    try:
        return FeasibleSet.default(params.layout, params.theta,
                                   cov_ratio=float(b.get("cov_ratio", 100.0)),
                                   offset_bound=float(b.get("offset_bound", 0.1)),
                                   base_bound=float(b.get("base_bound", 0.1)),
                                   delta_frac=float(b.get("delta_frac", 0.1)),
                                   free=b.get("free"))
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid bounds section: {exc}") from None


def _objective(cfg, robot, lg, truth, params):
    prior = make_prior(cfg, robot, lg, truth, params)
    hess = cfg.get("hessian", "exact")
    if hess not in ("exact", "gn"):
        raise CliError(f"unknown hessian '{hess}'")
    return BilevelObjective(robot, lg, params.layout, prior, _solver_options(cfg), hess)


def cmd_calibrate(rc):
    """Writes ``theta.json``, ``trace.csv`` and ``metrics.json``."""
    robot = load_robot_file(rc.robot)
    cfg = load_config(rc.config, "calibrate.yaml")
    if len(rc.data) != 1:
        raise CliError("calibrate needs exactly one --data log")
    params0 = _params_for(rc, cfg, robot)
    lg, truth = load_log_file(rc.data[0], robot)
    fs = _feasible_set(cfg, params0)
    try:
        fw = CalibrationConfig(**{**(cfg.get("frank_wolfe") or {}), "seed": rc.seed})
    except TypeError as exc:
        raise CliError(f"invalid frank_wolfe section: {exc}") from None
    obj = _objective(cfg, robot, lg, truth, params0)
    t0 = time.perf_counter()
    try:
        result = calibrate(obj, params0, fs, fw)
    except CalibError as exc:
        raise CliError(f"calibration failed: {exc}", EXIT_SOLVER) from None
    elapsed = time.perf_counter() - t0
    params = params0.with_theta(result.theta)
    rc.out.mkdir(parents=True, exist_ok=True)
    save_theta(rc.out / "theta.json", params)
    result.trace.write_csv(rc.out / "trace.csv")
    failed = result.reason.startswith("lower-level failure")
    _, res = obj.solve(params)
    rv, re = trajectory_metrics(res.trajectory, lg, truth)
    _, res0 = obj.solve(params0)
    rv0, re0 = trajectory_metrics(res0.trajectory, lg, truth)
    rep = MetricsReport(rv, re, bool(res.converged and not failed), elapsed,
                        {"outer": len(result.trace.rows), "lower_solves": obj.n_solves},
                        theta_error(params, truth),
                        {"loss": float(result.loss), "reason": result.reason,
                         "gap_converged": bool(result.converged),
                         "initial_rmse_v": rv0, "initial_rmse_euler": re0})
    rep.write(rc.out / "metrics.json")
    log.info("calibration: %s, loss %.6g, RMSE_v %.4g -> %.4g, RMSE_Euler %.4g -> %.4g",
             result.reason, result.loss, rv0, rv, re0, re)
    return EXIT_OK if rep.converged else EXIT_SOLVER


def cmd_gradcheck(rc):
    """Per-component comparison written to ``gradcheck.csv``.

    The relative error of component ``i`` is ``|g_i - fd_i| / max(|fd_i|,
    floor * |fd|_inf)``; the floor keeps near-zero components from turning
    rounding noise into large ratios.
    """
    robot = load_robot_file(rc.robot)
    cfg = load_config(rc.config, "calibrate.yaml")
    if len(rc.data) != 1:
        raise CliError("gradcheck needs exactly one --data log")
    params = _params_for(rc, cfg, robot)
    lg, truth = load_log_file(rc.data[0], robot)
    gc = cfg.get("gradcheck") or {}
    eps, tol = float(gc.get("eps", 1e-5)), float(gc.get("tol", 1e-3))
    floor = float(gc.get("floor", 1e-2))
    idx = gc.get("indices")
    idx = list(range(params.layout.size)) if idx is None else [int(i) for i in idx]
    # finite differences need the lower level solved to its rounding floor
    polish = int(gc.get("polish", 2))
    cfg = {**cfg, "solver": {**(cfg.get("solver") or {}), "polish": polish}}
    obj = _objective(cfg, robot, lg, truth, params)
    try:
        _, grad, _ = obj.gradient(params, corrupt=rc.corrupt)
        fd = fd_gradient(params, obj, eps, idx)
    except (MaxIterations, NotPD, NotFactorizable) as exc:
        raise CliError(f"gradient check aborted: {exc}", EXIT_SOLVER) from None
    if not np.all(np.isfinite(fd)):
        raise CliError("a finite-difference probe did not converge", EXIT_SOLVER)
    rel = relative_errors(grad[idx], fd, floor)
    names = params.layout.names()
    rc.out.mkdir(parents=True, exist_ok=True)
    with (rc.out / "gradcheck.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "name", "analytic", "fd", "rel_error", "pass"])
        for k, i in enumerate(idx):
            w.writerow([i, names[i], "%.17g" % grad[i], "%.17g" % fd[k], "%.6g" % rel[k],
                        int(rel[k] <= tol)])
    for k, i in enumerate(idx):
        print(f"{names[i]:>20s} {grad[i]: .6e} {fd[k]: .6e} {rel[k]:.3e} "
              f"{'ok' if rel[k] <= tol else 'FAIL'}")
    n_bad = int(np.sum(rel > tol))
    print(f"{len(idx) - n_bad}/{len(idx)} components within {tol:g}")
    return EXIT_OK if n_bad == 0 else EXIT_VERIFY


def relative_errors(analytic, fd, floor=1e-2):
    analytic = np.asarray(analytic, float)
    fd = np.asarray(fd, float)
    scale = np.maximum(np.abs(fd), floor * np.max(np.abs(fd), initial=0.0))
    scale = np.where(scale > 0, scale, 1.0)
    return np.abs(analytic - fd) / scale


COMMANDS = {
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "calibrate": cmd_calibrate,
    "gradcheck": cmd_gradcheck,
    "evaluate": cmd_evaluate,
}


# ----------------------------------------------------------------------
# entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "--script", dest="config",
                        help="YAML configuration (merged over the packaged default)")
    common.add_argument("--robot", help="robot description YAML (default: built-in quadruped)")
    common.add_argument("--data", action="append", help="sensor log; repeatable for evaluate")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1,
                        help="worker count (runs are single-process; kept for scripting)")
    common.add_argument("--verbose", "-v", action="count", default=0)

    parser = argparse.ArgumentParser(prog="legcalib", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic logs")
    for name in ("estimate", "calibrate", "gradcheck", "evaluate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--theta", help="parameter vector JSON")
        if name == "evaluate":
            p.add_argument("--baseline", help="reference parameter vector JSON")
        if name == "gradcheck":
            p.add_argument("--corrupt-sensitivity", type=float, default=0.0,
                           help=argparse.SUPPRESS)
    return parser


def _setup_logging(verbosity):
    if verbosity:
        level = logging.DEBUG if verbosity > 1 else logging.INFO
    else:
        name = os.environ.get("CALIB_LOG_LEVEL", "WARNING").upper()
        level = getattr(logging, name, None)
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    rc = RunConfig.from_args(args)
    try:
        if rc.jobs < 1:
            raise CliError("--jobs must be positive")
        rc.check_paths()
        return COMMANDS[rc.subcommand](rc)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
