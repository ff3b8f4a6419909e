# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled reductions for self-normalized tilt reweighting.

Every function here has a NumPy twin in ``_fallback.py`` with the same
signature and semantics; ``kernels.py`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, INFINITY

cnp.import_array()


def tilt_reduce(const double[:, ::1] X, const double[::1] theta, double t,
                Py_ssize_t n_groups, bint third):
    """Grouped weighted sums for the tilt exp(<theta,x> - t|x|^2/2).

    Returns ``(log_max, W, S1, S2, S3, sumw2)`` where ``W[g]`` is the
    shifted weight mass of contiguous block ``g``, ``S1`` the raw first
    sums, and ``S2``/``S3`` central sums about the pooled weighted mean.
    ``S3`` is ``None`` unless ``third`` is set.
    """
    cdef Py_ssize_t N = X.shape[0], n = X.shape[1]
    cdef Py_ssize_t i, j, k, l, g
    cdef double acc, lmax = -INFINITY, wi, wsum = 0.0, sumw2 = 0.0
    cdef double dj, djk

    logw_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] logw = logw_arr
    for i in range(N):
        acc = 0.0
        wi = 0.0
        for j in range(n):
            acc += theta[j] * X[i, j]
            wi += X[i, j] * X[i, j]
        logw[i] = acc - 0.5 * t * wi
        if logw[i] > lmax:
            lmax = logw[i]

    W_arr = np.zeros(n_groups, dtype=np.float64)
    S1_arr = np.zeros((n_groups, n), dtype=np.float64)
    S2_arr = np.zeros((n_groups, n, n), dtype=np.float64)
    cdef double[::1] W = W_arr
    cdef double[:, ::1] S1 = S1_arr
    cdef double[:, :, ::1] S2 = S2_arr
    cdef double[:, :, :, ::1] S3
    S3_arr = None
    if third:
        S3_arr = np.zeros((n_groups, n, n, n), dtype=np.float64)
        S3 = S3_arr

    mean_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] mean = mean_arr
    d_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] d = d_arr

    for i in range(N):
        g = (i * n_groups) // N
        wi = exp(logw[i] - lmax)
        logw[i] = wi
        W[g] += wi
        sumw2 += wi * wi
        for j in range(n):
            S1[g, j] += wi * X[i, j]

    for g in range(n_groups):
        wsum += W[g]
        for j in range(n):
            mean[j] += S1[g, j]
    for j in range(n):
        mean[j] /= wsum

    for i in range(N):
        g = (i * n_groups) // N
        wi = logw[i]
        if wi == 0.0:
            continue
        for j in range(n):
            d[j] = X[i, j] - mean[j]
        for j in range(n):
            dj = wi * d[j]
            for k in range(j, n):
                djk = dj * d[k]
                S2[g, j, k] += djk
                if third:
                    for l in range(k, n):
                        S3[g, j, k, l] += djk * d[l]

    # mirror the upper triangle into a full symmetric array
    for g in range(n_groups):
        for j in range(n):
            for k in range(j + 1, n):
                S2[g, k, j] = S2[g, j, k]
        if third:
            for j in range(n):
                for k in range(j, n):
                    for l in range(k, n):
                        acc = S3[g, j, k, l]
                        S3[g, j, l, k] = acc
                        S3[g, k, j, l] = acc
                        S3[g, k, l, j] = acc
                        S3[g, l, j, k] = acc
                        S3[g, l, k, j] = acc
    return lmax, W_arr, S1_arr, S2_arr, S3_arr, sumw2


def tilt_mean_cov_batch(const double[:, ::1] X, const double[:, ::1] thetas, double t):
    """Weighted mean, covariance and ESS for many tilts of one pool."""
    cdef Py_ssize_t N = X.shape[0], n = X.shape[1], B = thetas.shape[0]
    cdef Py_ssize_t b, i, j, k
    cdef double acc, sq, lmax, wi, wsum, w2

    means_arr = np.zeros((B, n), dtype=np.float64)
    covs_arr = np.zeros((B, n, n), dtype=np.float64)
    ess_arr = np.zeros(B, dtype=np.float64)
    cdef double[:, ::1] means = means_arr
    cdef double[:, :, ::1] covs = covs_arr
    cdef double[::1] ess = ess_arr

    half_sq_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] half_sq = half_sq_arr
    for i in range(N):
        sq = 0.0
        for j in range(n):
            sq += X[i, j] * X[i, j]
        half_sq[i] = 0.5 * sq

    w_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] w = w_arr

    for b in range(B):
        lmax = -INFINITY
        for i in range(N):
            acc = 0.0
            for j in range(n):
                acc += thetas[b, j] * X[i, j]
            acc -= t * half_sq[i]
            w[i] = acc
            if acc > lmax:
                lmax = acc
        wsum = 0.0
        w2 = 0.0
        for i in range(N):
            wi = exp(w[i] - lmax)
            w[i] = wi
            wsum += wi
            w2 += wi * wi
            for j in range(n):
                means[b, j] += wi * X[i, j]
        for j in range(n):
            means[b, j] /= wsum
        for i in range(N):
            wi = w[i] / wsum
            for j in range(n):
                sq = wi * (X[i, j] - means[b, j])
                for k in range(j, n):
                    covs[b, j, k] += sq * (X[i, k] - means[b, k])
        for j in range(n):
            for k in range(j + 1, n):
                covs[b, k, j] = covs[b, j, k]
        ess[b] = wsum * wsum / w2
    return means_arr, covs_arr, ess_arr


def neumaier_sum(const double[:, ::1] values):
    """Column sums in row order with Neumaier compensation."""
    cdef Py_ssize_t P = values.shape[0], m = values.shape[1]
    cdef Py_ssize_t p, j
    cdef double s, c, v, tmp
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    for j in range(m):
        s = 0.0
        c = 0.0
        for p in range(P):
            v = values[p, j]
            tmp = s + v
            if fabs(s) >= fabs(v):
                c += (s - tmp) + v
            else:
                c += (v - tmp) + s
            s = tmp
        out[j] = s + c
    return out_arr
