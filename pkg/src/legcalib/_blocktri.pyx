# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled block-tridiagonal Cholesky factor and multi-RHS solve.

Mirrors ``_factor_py`` / ``_solve_py`` in ``blocktri.py``.
"""

from libc.math cimport sqrt


cdef int _chol(double[:, ::1] A, double[:, ::1] L) noexcept nogil:
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return 0
        L[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    return 1


def factor(double[:, :, ::1] D, double[:, :, ::1] S,
           double[:, :, ::1] Ld, double[:, :, ::1] Ls):
    """Fill Ld/Ls; return -1 on success or the failing block index."""
    cdef Py_ssize_t N = D.shape[0]
    cdef Py_ssize_t n = D.shape[1]
    cdef Py_ssize_t k, i, j, l
    cdef double s
    cdef double[:, ::1] A
    import numpy as np
    A = np.empty((n, n))
    with nogil:
        for k in range(N):
            for i in range(n):
                for j in range(i + 1):
                    s = D[k, i, j]
                    if k > 0:
                        for l in range(n):
                            s -= Ls[k - 1, i, l] * Ls[k - 1, j, l]
                    A[i, j] = s
                    A[j, i] = s
            if not _chol(A, Ld[k]):
                with gil:
                    return k
            if k < N - 1:
                # row i of L[k+1,k] solves L_kk x = S_k[i, :]^T by forward substitution
                for i in range(n):
                    for j in range(n):
                        s = S[k, i, j]
                        for l in range(j):
                            s -= Ls[k, i, l] * Ld[k, j, l]
                        Ls[k, i, j] = s / Ld[k, j, j]
    return -1


def solve(double[:, :, ::1] Ld, double[:, :, ::1] Ls, double[:, :, ::1] X):
    """In-place solve of (L L^T) X = X for X of shape (N, n, m)."""
    cdef Py_ssize_t N = Ld.shape[0]
    cdef Py_ssize_t n = Ld.shape[1]
    cdef Py_ssize_t m = X.shape[2]
    cdef Py_ssize_t k, i, j, c
    cdef double s
    with nogil:
        for k in range(N):
            for c in range(m):
                for i in range(n):
                    s = X[k, i, c]
                    if k > 0:
                        for j in range(n):
                            s -= Ls[k - 1, i, j] * X[k - 1, j, c]
                    for j in range(i):
                        s -= Ld[k, i, j] * X[k, j, c]
                    X[k, i, c] = s / Ld[k, i, i]
        for k in range(N - 1, -1, -1):
            for c in range(m):
                for i in range(n - 1, -1, -1):
                    s = X[k, i, c]
                    if k < N - 1:
                        for j in range(n):
                            s -= Ls[k, j, i] * X[k + 1, j, c]
                    for j in range(i + 1, n):
                        s -= Ld[k, j, i] * X[k, j, c]
                    X[k, i, c] = s / Ld[k, i, i]
    return X
