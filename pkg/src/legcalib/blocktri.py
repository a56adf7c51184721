"""Symmetric block-tridiagonal matrices and their block Cholesky factor.

A matrix is stored as ``diag`` (N, n, n) and ``sub`` (N-1, n, n) with
``sub[k] = H[k+1, k]``.  The factor ``L`` is block lower-bidiagonal:

    L[k, k] = chol(D_k - L[k, k-1] L[k, k-1]^T)
    L[k+1, k] = H[k+1, k] L[k, k]^{-T}

The compiled kernel in ``_blocktri`` is used when importable; set
``LEGCALIB_PURE_PYTHON=1`` to force the numpy/scipy path.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotFactorizable

try:
    if os.environ.get("LEGCALIB_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _blocktri as _ext
    BACKEND = "cython"
except ImportError:  # pragma: no cover - depends on build
    _ext = None
    BACKEND = "python"

# number of block factorizations performed, per backend call site
stats = {"factorizations": 0}


class BlockTridiagonal:
    def __init__(self, diag, sub):
        self.diag = np.ascontiguousarray(diag, dtype=float)
        self.sub = np.ascontiguousarray(sub, dtype=float)

    @property
    def n_blocks(self):
        return self.diag.shape[0]

    @property
    def block(self):
        return self.diag.shape[1]

    @property
    def shape(self):
        d = self.n_blocks * self.block
        return (d, d)

    def copy(self):
        return BlockTridiagonal(self.diag.copy(), self.sub.copy())

    def to_dense(self):
        N, n = self.n_blocks, self.block
        out = np.zeros((N * n, N * n))
        for k in range(N):
            out[k * n:(k + 1) * n, k * n:(k + 1) * n] = self.diag[k]
        for k in range(N - 1):
            out[(k + 1) * n:(k + 2) * n, k * n:(k + 1) * n] = self.sub[k]
            out[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n] = self.sub[k].T
        return out

    def matvec(self, x):
        """``H @ x`` for x of shape (N, n) or (N, n, m)."""
        x = np.asarray(x, dtype=float)
        vec = x.ndim == 2
        if vec:
            x = x[..., None]
        y = self.diag @ x
        y[1:] += self.sub @ x[:-1]
        y[:-1] += np.swapaxes(self.sub, -1, -2) @ x[1:]
        return y[..., 0] if vec else y

    def damped(self, lam, scale=None):
        """Copy with ``lam * scale`` added to the diagonal (``scale`` (N, n))."""
        out = self.copy()
        idx = np.arange(self.block)
        add = lam if scale is None else lam * scale
        out.diag[:, idx, idx] += add
        return out


class BlockCholesky:
    def __init__(self, Ld, Ls):
        self.Ld = Ld
        self.Ls = Ls

    def solve(self, B):
        """Solve ``H X = B`` for B of shape (N, n) or (N, n, m)."""
        B = np.asarray(B, dtype=float)
        vec = B.ndim == 2
        X = np.ascontiguousarray(B[..., None] if vec else B, dtype=float).copy()
        if _ext is not None:
            _ext.solve(self.Ld, self.Ls, X)
        else:
            _solve_py(self.Ld, self.Ls, X)
        return X[..., 0] if vec else X


def cholesky(H):
    """Block Cholesky factor of an SPD block-tridiagonal matrix."""
    stats["factorizations"] += 1
    N, n = H.n_blocks, H.block
    Ld = np.zeros((N, n, n))
    Ls = np.zeros((max(N - 1, 0), n, n))
    if _ext is not None:
        status = _ext.factor(H.diag, H.sub, Ld, Ls)
    else:
        status = _factor_py(H.diag, H.sub, Ld, Ls)
    if status >= 0:
        raise NotFactorizable(f"pivot block {status} is not positive definite")
    return BlockCholesky(Ld, Ls)


def _factor_py(D, S, Ld, Ls):
    N = D.shape[0]
    prev = None
    for k in range(N):
        A = D[k].copy()
        if prev is not None:
            A -= prev @ prev.T
        try:
            Lk = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            return k
        Ld[k] = Lk
        if k < N - 1:
            # L[k+1,k] = S_k L_kk^{-T}  <=>  L_kk L[k+1,k]^T = S_k^T
            prev = solve_triangular(Lk, S[k].T, lower=True).T
            Ls[k] = prev
    return -1


def _solve_py(Ld, Ls, X):
    N = Ld.shape[0]
    for k in range(N):
        if k > 0:
            X[k] -= Ls[k - 1] @ X[k - 1]
        X[k] = solve_triangular(Ld[k], X[k], lower=True)
    for k in range(N - 1, -1, -1):
        if k < N - 1:
            X[k] -= Ls[k].T @ X[k + 1]
        X[k] = solve_triangular(Ld[k], X[k], lower=True, trans="T")
    return X


def solve_dense(H, B):
    """Dense reference solve used by tests and small problems."""
    A = H.to_dense()
    N, n = H.n_blocks, H.block
    Bf = np.asarray(B, dtype=float).reshape(N * n, -1)
    return np.linalg.solve(A, Bf).reshape(np.shape(B))
