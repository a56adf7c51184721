"""Flattened calibration vector, Cholesky covariance blocks, feasible set.

Ordering of the flat vector (frozen)::

    Q_p, Q_a, Q_w, Q_foot, Q_ba, Q_bw, R_alpha, R_alphadot, P0,
    theta_foot (leg-major, xyz per leg), theta_base (xyz)

Every covariance block stores the free entries of a lower-triangular factor
``L`` with ``Sigma = L L^T``.  In ``diag`` mode the entries are the positive
diagonal of ``L`` (standard deviations).  In ``full`` mode they are the
lower triangle in row-major order, e.g. ``(L00, L10, L11, L20, L21, L22)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import BoxViolation
from .manifold import tangent_dim

COV_BLOCKS = ("Q_p", "Q_a", "Q_w", "Q_foot", "Q_ba", "Q_bw",
              "R_alpha", "R_alphadot", "P0")
PROCESS_BLOCKS = COV_BLOCKS[:6]
PD_FLOOR = 1e-8

# How each process block enters Q_w for a step of length dt.  Random walks
# scale with dt; white IMU noise integrated over one step scales with dt^2.
DT_POWER = {"Q_p": 1, "Q_a": 2, "Q_w": 2, "Q_foot": 1, "Q_ba": 1, "Q_bw": 1}


def block_dim(name, n_feet):
    return tangent_dim(n_feet) if name == "P0" else 3


@dataclass(frozen=True)
class ParamLayout:
    n_feet: int = 4
    modes: tuple = ()  # (block name, "diag" | "full") overrides

    def mode(self, name):
        return dict(self.modes).get(name, "diag")

    def block_size(self, name):
        d = block_dim(name, self.n_feet)
        return d if self.mode(name) == "diag" else d * (d + 1) // 2

    @property
    def slices(self):
        out = {}
        i = 0
        for name in COV_BLOCKS:
            n = self.block_size(name)
            out[name] = slice(i, i + n)
            i += n
        out["theta_foot"] = slice(i, i + 3 * self.n_feet)
        i += 3 * self.n_feet
        out["theta_base"] = slice(i, i + 3)
        return out

    @property
    def size(self):
        return self.slices["theta_base"].stop

    @property
    def n_cov(self):
        return self.slices["theta_foot"].start

    def names(self):
        """Human-readable name of every entry of the flat vector."""
        out = []
        for name in COV_BLOCKS:
            d = block_dim(name, self.n_feet)
            if self.mode(name) == "diag":
                out += [f"{name}[{i}]" for i in range(d)]
            else:
                out += [f"{name}[{i},{j}]" for i in range(d) for j in range(i + 1)]
        out += [f"theta_foot[{j}].{c}" for j in range(self.n_feet) for c in "xyz"]
        out += [f"theta_base.{c}" for c in "xyz"]
        return out

    def schema_hash(self):
        blob = ";".join(self.names()).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def diag_mask(self):
        """True where an entry is a Cholesky diagonal (must stay positive)."""
        mask = np.zeros(self.size, dtype=bool)
        sl = self.slices
        for name in COV_BLOCKS:
            d = block_dim(name, self.n_feet)
            if self.mode(name) == "diag":
                mask[sl[name]] = True
            else:
                idx = [i * (i + 1) // 2 + i for i in range(d)]
                mask[sl[name].start + np.array(idx)] = True
        return mask

    def factor(self, theta, name):
        d = block_dim(name, self.n_feet)
        vals = theta[self.slices[name]]
        if self.mode(name) == "diag":
            return np.diag(vals)
        L = np.zeros((d, d))
        L[np.tril_indices(d)] = vals
        return L

    def factor_derivatives(self, name):
        """Constant dL/dtheta for every entry of the block, shape (n, d, d)."""
        d = block_dim(name, self.n_feet)
        n = self.block_size(name)
        out = np.zeros((n, d, d))
        if self.mode(name) == "diag":
            out[np.arange(d), np.arange(d), np.arange(d)] = 1.0
        else:
            rows, cols = np.tril_indices(d)
            out[np.arange(n), rows, cols] = 1.0
        return out

    def cov_from_factor_vec(self, name, vec):
        theta = np.zeros(self.size)
        theta[self.slices[name]] = vec
        L = self.factor(theta, name)
        return L @ L.T

    def factor_vec(self, name, L):
        """Inverse of :meth:`factor` for one block."""
        if self.mode(name) == "diag":
            return np.diag(L).copy()
        return L[np.tril_indices(L.shape[0])].copy()


@dataclass
class CalibrationParams:
    """The upper-level decision vector together with its layout."""

    theta: np.ndarray
    layout: ParamLayout = field(default_factory=ParamLayout)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).copy()
        if self.theta.shape != (self.layout.size,):
            raise ValueError(f"theta has shape {self.theta.shape}, layout expects "
                             f"({self.layout.size},)")

    def copy(self):
        return CalibrationParams(self.theta.copy(), self.layout)

    def with_theta(self, theta):
        return CalibrationParams(theta, self.layout)

    def factor(self, name):
        return self.layout.factor(self.theta, name)

    def cov(self, name):
        L = self.factor(name)
        return L @ L.T

    def cov_derivatives(self, name):
        """dSigma/dtheta for every entry of a block, shape (n, d, d)."""
        L = self.factor(name)
        dL = self.layout.factor_derivatives(name)
        dS = dL @ L.T
        return dS + np.swapaxes(dS, -1, -2)

    @property
    def theta_foot(self):
        return self.theta[self.layout.slices["theta_foot"]].reshape(self.layout.n_feet, 3)

    @property
    def theta_base(self):
        return self.theta[self.layout.slices["theta_base"]]

    @classmethod
    def from_stds(cls, stds, theta_foot=None, theta_base=None, layout=None):
        """Build a diagonal-mode vector from per-block standard deviations.

        ``stds`` maps block names to a scalar or a length-d vector.
        """
        layout = layout or ParamLayout()
        theta = np.zeros(layout.size)
        sl = layout.slices
        for name in COV_BLOCKS:
            d = block_dim(name, layout.n_feet)
            s = np.broadcast_to(np.asarray(stds[name], dtype=float), (d,))
            theta[sl[name]] = layout.factor_vec(name, np.diag(s))
        if theta_foot is not None:
            theta[sl["theta_foot"]] = np.asarray(theta_foot, dtype=float).ravel()
        if theta_base is not None:
            theta[sl["theta_base"]] = theta_base
        return cls(theta, layout)


def check_box(theta, lower=None, upper=None, layout=None):
    """Raise :class:`BoxViolation` if ``theta`` leaves the box or a Cholesky
    diagonal is not positive."""
    theta = np.asarray(theta)
    if lower is not None and np.any(theta < lower):
        i = int(np.argmax(lower - theta))
        raise BoxViolation(f"entry {i} = {theta[i]:.6g} below lower bound {lower[i]:.6g}")
    if upper is not None and np.any(theta > upper):
        i = int(np.argmax(theta - upper))
        raise BoxViolation(f"entry {i} = {theta[i]:.6g} above upper bound {upper[i]:.6g}")
    if layout is not None:
        diag = theta[layout.diag_mask()]
        if np.any(diag <= 0):
            raise BoxViolation("non-positive Cholesky diagonal")


def assemble_process_cov(params, dt, lower=None, upper=None):
    """Process-noise blocks for one step of length ``dt``.

    Returns a dict block name -> 3x3 covariance (``Q_foot`` is per foot).
    """
    check_box(params.theta, lower, upper, params.layout)
    return {name: params.cov(name) * dt ** DT_POWER[name] for name in PROCESS_BLOCKS}


def assemble_prior_cov(params, lower=None, upper=None):
    check_box(params.theta, lower, upper, params.layout)
    return params.cov("P0")


@dataclass
class FeasibleSet:
    """Box bounds plus the trust-region radius defining C_t.

    ``delta`` is an elementwise radius; ``delta_max`` caps its growth.
    """

    lower: np.ndarray
    upper: np.ndarray
    delta: np.ndarray
    delta_max: np.ndarray = None
    eps: float = PD_FLOOR
    shrink: float = 0.5
    grow: float = 1.5

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).copy()
        self.upper = np.asarray(self.upper, dtype=float).copy()
        self.delta = np.broadcast_to(np.asarray(self.delta, dtype=float),
                                     self.lower.shape).copy()
        if self.delta_max is None:
            self.delta_max = self.upper - self.lower
        self.delta_max = np.broadcast_to(np.asarray(self.delta_max, dtype=float),
                                         self.lower.shape).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def free(self):
        return self.upper > self.lower

    @classmethod
    def default(cls, layout, theta0, cov_ratio=100.0, offset_bound=0.1,
                base_bound=0.1, delta_frac=0.1, free=None, eps=PD_FLOOR):
        """Bounds around an initial guess.

        Cholesky diagonals range over ``[theta0/ratio, theta0*ratio]`` (floored
        at ``eps``), off-diagonals over ``+-ratio*max(|theta0 row|)``, offsets
        over ``+-bound``.  ``free`` optionally names the groups left free
        (``"cov"``, ``"theta_foot"``, ``"theta_base"`` or block names); the
        rest are frozen at ``theta0`` by equal bounds.
        """
        theta0 = np.asarray(theta0, dtype=float)
        lo = np.empty(layout.size)
        hi = np.empty(layout.size)
        sl = layout.slices
        diag = layout.diag_mask()
        cov = slice(0, layout.n_cov)
        t = theta0[cov]
        scale = np.max(np.abs(t[diag[cov]])) if np.any(diag[cov]) else 1.0
        lo[cov] = np.where(diag[cov], np.maximum(np.abs(t) / cov_ratio, eps),
                           -cov_ratio * scale)
        hi[cov] = np.where(diag[cov], np.abs(t) * cov_ratio, cov_ratio * scale)
        lo[sl["theta_foot"]] = -offset_bound
        hi[sl["theta_foot"]] = offset_bound
        lo[sl["theta_base"]] = -base_bound
        hi[sl["theta_base"]] = base_bound
        if free is not None:
            keep = np.zeros(layout.size, dtype=bool)
            for group in free:
                if group == "cov":
                    keep[cov] = True
                else:
                    keep[sl[group]] = True
            lo[~keep] = theta0[~keep]
            hi[~keep] = theta0[~keep]
        lo = np.minimum(lo, theta0)
        hi = np.maximum(hi, theta0)
        return cls(lo, hi, delta_frac * (hi - lo), eps=eps)
