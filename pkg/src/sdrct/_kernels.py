"""Compiled inner loops over raw CSR/CSC arrays."""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def kaczmarz_sweep(indptr, indices, data, row_norm_sq, p, valid, f, alpha):
    """One in-place pass of row projections over all valid rows, in row order."""
    n_rows = indptr.shape[0] - 1
    for i in range(n_rows):
        if not valid[i]:
            continue
        nrm = row_norm_sq[i]
        if nrm <= 0.0:
            continue
        lo = indptr[i]
        hi = indptr[i + 1]
        dot = 0.0
        for k in range(lo, hi):
            dot += data[k] * f[indices[k]]
        scale = alpha * (dot - p[i]) / nrm
        if scale != 0.0:
            for k in range(lo, hi):
                f[indices[k]] -= scale * data[k]
    return f


@njit(cache=True, nogil=True)
def _soft(z, eta):
    if z > eta:
        return z - eta
    if z < -eta:
        return z + eta
    return 0.0


@njit(cache=True, nogil=True)
def lasso_cd(indptr, indices, data, col_sq, r, f, lam, inv_n, tol, max_sweeps):
    """Cyclic coordinate descent for (1/2n)||W f - p||^2 + lam ||f||_1.

    ``r`` holds the residual ``p - W f`` on valid rays (invalid rows of the
    CSC arrays must already be zeroed) and is updated in place. Full sweeps
    alternate with sweeps restricted to the active set until a full sweep
    moves no coordinate by ``tol`` or more. Returns (sweeps, converged).
    """
    n_cols = indptr.shape[0] - 1
    sweeps = 0
    while sweeps < max_sweeps:
        # full sweep
        max_delta = 0.0
        for j in range(n_cols):
            c = col_sq[j] * inv_n
            if c <= 0.0:
                continue
            lo = indptr[j]
            hi = indptr[j + 1]
            g = 0.0
            for k in range(lo, hi):
                g += data[k] * r[indices[k]]
            z = g * inv_n + c * f[j]
            new = _soft(z, lam) / c
            delta = new - f[j]
            if delta != 0.0:
                for k in range(lo, hi):
                    r[indices[k]] -= delta * data[k]
                f[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        sweeps += 1
        if max_delta < tol:
            return sweeps, True
        # active-set sweeps
        while sweeps < max_sweeps:
            max_delta = 0.0
            for j in range(n_cols):
                if f[j] == 0.0:
                    continue
                c = col_sq[j] * inv_n
                lo = indptr[j]
                hi = indptr[j + 1]
                g = 0.0
                for k in range(lo, hi):
                    g += data[k] * r[indices[k]]
                z = g * inv_n + c * f[j]
                new = _soft(z, lam) / c
                delta = new - f[j]
                if delta != 0.0:
                    for k in range(lo, hi):
                        r[indices[k]] -= delta * data[k]
                    f[j] = new
                    if abs(delta) > max_delta:
                        max_delta = abs(delta)
            sweeps += 1
            if max_delta < tol:
                break
    return sweeps, False


def as_arrays(matrix):
    """Raw (indptr, indices, data) of a scipy compressed matrix, in kernel dtypes."""
    return (np.ascontiguousarray(matrix.indptr, dtype=np.int64),
            np.ascontiguousarray(matrix.indices, dtype=np.int32),
            np.ascontiguousarray(matrix.data, dtype=np.float64))
