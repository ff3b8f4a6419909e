"""NumPy implementations of the reduction kernels.

Same contracts as the compiled module; used when it is unavailable or
when ``SLLAB_PURE_PYTHON=1``.
"""
import numpy as np

_CHUNK = 8192


def _block_starts(N, n_groups):
    # first index i with (i * G) // N == g, matching the compiled loop
    g = np.arange(n_groups, dtype=np.int64)
    return (g * N + n_groups - 1) // n_groups


def tilt_reduce(X, theta, t, n_groups, third):
    X = np.ascontiguousarray(X, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    N, n = X.shape
    logw = X @ theta - 0.5 * t * np.einsum("ij,ij->i", X, X)
    lmax = float(logw.max())
    w = np.exp(logw - lmax)
    starts = _block_starts(N, n_groups)
    W = np.add.reduceat(w, starts)
    S1 = np.add.reduceat(w[:, None] * X, starts, axis=0)
    mean = S1.sum(axis=0) / W.sum()
    S2 = np.zeros((n_groups, n, n))
    S3 = np.zeros((n_groups, n, n, n)) if third else None
    groups = (np.arange(N, dtype=np.int64) * n_groups) // N
    for lo in range(0, N, _CHUNK):
        hi = min(N, lo + _CHUNK)
        d = X[lo:hi] - mean
        wd = w[lo:hi, None] * d
        gi = groups[lo:hi]
        outer = wd[:, :, None] * d[:, None, :]
        np.add.at(S2, gi, outer)
        if third:
            np.add.at(S3, gi, outer[:, :, :, None] * d[:, None, None, :])
    return lmax, W, S1, S2, S3, float(np.dot(w, w))


def tilt_mean_cov_batch(X, thetas, t):
    X = np.ascontiguousarray(X, dtype=np.float64)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    B = thetas.shape[0]
    n = X.shape[1]
    half_sq = 0.5 * np.einsum("ij,ij->i", X, X)
    means = np.empty((B, n))
    covs = np.empty((B, n, n))
    ess = np.empty(B)
    step = max(1, (1 << 22) // max(1, X.shape[0]))
    for lo in range(0, B, step):
        hi = min(B, lo + step)
        lw = thetas[lo:hi] @ X.T - t * half_sq
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        wsum = w.sum(axis=1)
        m = (w @ X) / wsum[:, None]
        p = w / wsum[:, None]
        for b in range(hi - lo):
            d = X - m[b]
            covs[lo + b] = (p[b, :, None] * d).T @ d
        means[lo:hi] = m
        ess[lo:hi] = wsum**2 / np.einsum("ij,ij->i", w, w)
    return means, covs, ess


def neumaier_sum(values):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    s = np.zeros(values.shape[1])
    c = np.zeros(values.shape[1])
    for v in values:
        tmp = s + v
        big = np.abs(s) >= np.abs(v)
        c += np.where(big, (s - tmp) + v, (v - tmp) + s)
        s = tmp
    return s + c
