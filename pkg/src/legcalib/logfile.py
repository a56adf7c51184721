"""Sensor logs, ground-truth bundles and their text serialization.

File layout (line oriented, ``#`` starts a comment)::

    legcalib-log
    schema_version 1
    robot_hash <hex>
    dt <float>
    n_legs <int>
    n_steps <int>
    has_truth <0|1>
    data
    <k> acc[3] gyro[3] alpha[3n] alpha_dot[3n] contact[n] mocap_q[4] mocap_p[3] mocap_v[3]
    ...
    truth                      (only when has_truth = 1)
    theta <m floats>
    <k> quat[4] pos[3] vel[3] feet[3n] ba[3] bg[3]
    ...
    end

Floats are written with ``%.17g`` so a round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MalformedRecord, SchemaVersionMismatch
from .manifold import Trajectory

LOG_SCHEMA_VERSION = 1
MAGIC = "legcalib-log"


@dataclass
class SensorLog:
    """Time-indexed proprioceptive and motion-capture records.

    All arrays share the leading dimension ``N = T + 1``.  ``acc``/``gyro`` at
    step k drive the transition k -> k+1; the last IMU sample is only used by
    the velocity channel.
    """

    dt: float
    acc: np.ndarray
    gyro: np.ndarray
    alpha: np.ndarray
    alpha_dot: np.ndarray
    contact: np.ndarray
    mocap_quat: np.ndarray
    mocap_pos: np.ndarray
    mocap_vel: np.ndarray
    robot_hash: str = ""

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n = np.shape(self.acc)[0]
        for name in ("gyro", "alpha", "alpha_dot", "contact", "mocap_quat",
                     "mocap_pos", "mocap_vel"):
            arr = getattr(self, name)
            if np.shape(arr)[0] != n:
                raise LengthMismatch(f"{name} has {np.shape(arr)[0]} samples, expected {n}")
        self.contact = np.asarray(self.contact, dtype=bool)

    def __len__(self):
        return np.shape(self.acc)[0]

    @property
    def horizon(self):
        return len(self) - 1

    @property
    def n_legs(self):
        return np.shape(self.alpha)[1]

    def slice(self, start, stop):
        kw = {name: getattr(self, name)[start:stop] for name in
              ("acc", "gyro", "alpha", "alpha_dot", "contact", "mocap_quat",
               "mocap_pos", "mocap_vel")}
        return SensorLog(self.dt, robot_hash=self.robot_hash, **kw)


@dataclass
class TruthBundle:
    """Generating trajectory and parameter vector of a synthetic log."""

    trajectory: Trajectory
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def slice(self, start, stop):
        return TruthBundle(self.trajectory.slice(start, stop), self.theta.copy())


def _fmt(values):
    return " ".join("%.17g" % v for v in np.ravel(values))


def export_log(path, log, truth=None):
    n, nf = len(log), log.n_legs
    lines = [MAGIC,
             f"schema_version {LOG_SCHEMA_VERSION}",
             f"robot_hash {log.robot_hash or '-'}",
             f"dt {'%.17g' % log.dt}",
             f"n_legs {nf}",
             f"n_steps {n}",
             f"has_truth {int(truth is not None)}",
             "data"]
    for k in range(n):
        lines.append(" ".join([
            str(k), _fmt(log.acc[k]), _fmt(log.gyro[k]), _fmt(log.alpha[k]),
            _fmt(log.alpha_dot[k]), " ".join(str(int(c)) for c in log.contact[k]),
            _fmt(log.mocap_quat[k]), _fmt(log.mocap_pos[k]), _fmt(log.mocap_vel[k])]))
    if truth is not None:
        X = truth.trajectory
        if len(X) != n:
            raise LengthMismatch("truth trajectory and log differ in length")
        lines.append("truth")
        lines.append("theta " + _fmt(truth.theta) if truth.theta.size else "theta")
        for k in range(n):
            lines.append(" ".join([str(k), _fmt(X.quat[k]), _fmt(X.pos[k]),
                                   _fmt(X.vel[k]), _fmt(X.feet[k]), _fmt(X.ba[k]),
                                   _fmt(X.bg[k])]))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def import_log(path):
    """Read a log file; returns ``(SensorLog, TruthBundle | None)``.

    Raises
    ------
    SchemaVersionMismatch
        The file was written with a different schema version.
    MalformedRecord
        Any structural problem; the message carries the line number.
    """
    raw = Path(path).read_text().splitlines()
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(raw)]
    lines = [(i, ln) for i, ln in lines if ln]
    it = iter(lines)

    def nxt(what):
        try:
            return next(it)
        except StopIteration:
            raise MalformedRecord(f"unexpected end of file while reading {what}",
                                  line=len(raw)) from None

    lineno, ln = nxt("header")
    if ln != MAGIC:
        raise MalformedRecord(f"expected '{MAGIC}'", line=lineno)
    header = {}
    while True:
        lineno, ln = nxt("header")
        if ln == "data":
            break
        parts = ln.split()
        if len(parts) != 2:
            raise MalformedRecord(f"bad header entry '{ln}'", line=lineno)
        header[parts[0]] = (parts[1], lineno)
    for key in ("schema_version", "robot_hash", "dt", "n_legs", "n_steps", "has_truth"):
        if key not in header:
            raise MalformedRecord(f"missing header key '{key}'", line=lineno)
    try:
        version = int(header["schema_version"][0])
        dt = float(header["dt"][0])
        nf = int(header["n_legs"][0])
        n = int(header["n_steps"][0])
        has_truth = bool(int(header["has_truth"][0]))
    except ValueError as exc:
        raise MalformedRecord(f"bad header value: {exc}", line=lineno) from None
    if version != LOG_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"log schema version {version}, this build reads {LOG_SCHEMA_VERSION}")
    robot_hash = header["robot_hash"][0]
    robot_hash = "" if robot_hash == "-" else robot_hash

    width = 1 + 3 + 3 + 3 * nf + 3 * nf + nf + 4 + 3 + 3
    rows = np.empty((n, width - 1))
    for k in range(n):
        lineno, ln = nxt("data record")
        rows[k] = _parse_row(ln, lineno, width, k)
    o = 0

    def take(w):
        nonlocal o
        out = rows[:, o:o + w]
        o += w
        return out

    acc, gyro = take(3), take(3)
    alpha = take(3 * nf).reshape(n, nf, 3)
    alpha_dot = take(3 * nf).reshape(n, nf, 3)
    contact_f = take(nf)
    if np.any((contact_f != 0) & (contact_f != 1)):
        raise MalformedRecord("contact flags must be 0 or 1")
    mq, mp, mv = take(4), take(3), take(3)
    try:
        log = SensorLog(dt, acc.copy(), gyro.copy(), alpha.copy(), alpha_dot.copy(),
                        contact_f.astype(bool), mq.copy(), mp.copy(), mv.copy(),
                        robot_hash=robot_hash)
    except (ValueError, LengthMismatch) as exc:
        raise MalformedRecord(str(exc)) from None

    truth = None
    if has_truth:
        lineno, ln = nxt("truth section")
        if ln != "truth":
            raise MalformedRecord("expected 'truth'", line=lineno)
        lineno, ln = nxt("theta")
        parts = ln.split()
        if not parts or parts[0] != "theta":
            raise MalformedRecord("expected 'theta' record", line=lineno)
        try:
            theta = np.array([float(x) for x in parts[1:]])
        except ValueError:
            raise MalformedRecord("non-numeric theta entry", line=lineno) from None
        tw = 1 + 4 + 3 + 3 + 3 * nf + 6
        trows = np.empty((n, tw - 1))
        for k in range(n):
            lineno, ln = nxt("truth record")
            trows[k] = _parse_row(ln, lineno, tw, k)
        feet = trows[:, 10:10 + 3 * nf].reshape(n, nf, 3)
        X = Trajectory(trows[:, 0:4], trows[:, 4:7], trows[:, 7:10], feet,
                       trows[:, 10 + 3 * nf:13 + 3 * nf], trows[:, 13 + 3 * nf:16 + 3 * nf])
        truth = TruthBundle(X, theta)
    lineno, ln = nxt("end marker")
    if ln != "end":
        raise MalformedRecord("expected 'end'", line=lineno)
    return log, truth


def _parse_row(ln, lineno, width, k):
    parts = ln.split()
    if len(parts) != width:
        raise MalformedRecord(f"expected {width} fields, found {len(parts)}", line=lineno)
    try:
        idx = int(parts[0])
        vals = [float(x) for x in parts[1:]]
    except ValueError:
        raise MalformedRecord("non-numeric field", line=lineno) from None
    if idx != k:
        raise MalformedRecord(f"record index {idx}, expected {k}", line=lineno)
    if not np.all(np.isfinite(vals)):
        raise MalformedRecord("non-finite value", line=lineno)
    return vals
