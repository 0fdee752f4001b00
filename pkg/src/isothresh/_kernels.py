"""Compiled pool-adjacent-violators kernels.

All kernels take responses ``y`` and positive weights ``w`` that are already
ordered by covariate, with distinct covariates.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _two_sum_err(a, b, s):
    # Neumaier error term of s = fl(a + b)
    if abs(a) >= abs(b):
        return (a - s) + b
    return (b - s) + a


@njit(cache=True, nogil=True)
def pava_blocks(y, w):
    """Return (starts, means, weights) of the PAVA blocks."""
    n = y.shape[0]
    start = np.empty(n, np.int64)
    wsum = np.empty(n)
    ssum = np.empty(n)
    scomp = np.empty(n)
    top = -1
    for i in range(n):
        top += 1
        start[top] = i
        wsum[top] = w[i]
        ssum[top] = w[i] * y[i]
        scomp[top] = 0.0
        while top > 0 and (ssum[top - 1] + scomp[top - 1]) / wsum[top - 1] > (
            ssum[top] + scomp[top]
        ) / wsum[top]:
            a = ssum[top - 1]
            b = ssum[top]
            s = a + b
            scomp[top - 1] += scomp[top] + _two_sum_err(a, b, s)
            ssum[top - 1] = s
            wsum[top - 1] += wsum[top]
            top -= 1
    nb = top + 1
    means = np.empty(nb)
    for j in range(nb):
        means[j] = (ssum[j] + scomp[j]) / wsum[j]
    return start[:nb].copy(), means, wsum[:nb].copy()


@njit(cache=True, nogil=True)
def pava_fitted(y, w):
    """Fitted value at every point."""
    starts, means, _ = pava_blocks(y, w)
    n = y.shape[0]
    out = np.empty(n)
    nb = starts.shape[0]
    for j in range(nb):
        stop = starts[j + 1] if j + 1 < nb else n
        for i in range(starts[j], stop):
            out[i] = means[j]
    return out


@njit(cache=True, nogil=True)
def weighted_rss(y, w, fit):
    s = 0.0
    c = 0.0
    for i in range(y.shape[0]):
        r = y[i] - fit[i]
        t = w[i] * r * r
        u = s + t
        c += _two_sum_err(s, t, u)
        s = u
    return s + c


@njit(cache=True, nogil=True)
def constrained_fitted(y, w, split, theta0):
    """Constrained fit: first ``split`` points capped at theta0, rest floored."""
    n = y.shape[0]
    out = np.empty(n)
    if split > 0:
        left = pava_fitted(y[:split], w[:split])
        for i in range(split):
            out[i] = min(left[i], theta0)
    if split < n:
        right = pava_fitted(y[split:], w[split:])
        for i in range(n - split):
            out[split + i] = max(right[i], theta0)
    return out


@njit(cache=True, nogil=True)
def constrained_rss_at_splits(y, w, theta0, splits):
    """Constrained residual sum of squares for each split, each refitted from scratch."""
    out = np.empty(splits.shape[0])
    for j in range(splits.shape[0]):
        fit = constrained_fitted(y, w, splits[j], theta0)
        out[j] = weighted_rss(y, w, fit)
    return out


@njit(cache=True, nogil=True)
def _block_contrib(W, S, Q, theta0):
    m = S / W
    if m <= theta0:
        return Q - S * S / W
    return Q - 2.0 * theta0 * S + theta0 * theta0 * W


@njit(cache=True, nogil=True)
def capped_prefix_rss(y, w, theta0):
    """RSS of min(PAVA(prefix), theta0) for every prefix length 0..n in one pass.

    The stack-based PAVA processed left to right holds the fit of each prefix,
    so a running total of per-block contributions gives all n + 1 values.
    """
    n = y.shape[0]
    out = np.empty(n + 1)
    Wst = np.empty(n)
    Sst = np.empty(n)
    Qst = np.empty(n)
    total = 0.0
    top = -1
    out[0] = 0.0
    for i in range(n):
        top += 1
        Wst[top] = w[i]
        Sst[top] = w[i] * y[i]
        Qst[top] = w[i] * y[i] * y[i]
        total += _block_contrib(Wst[top], Sst[top], Qst[top], theta0)
        while top > 0 and Sst[top - 1] / Wst[top - 1] > Sst[top] / Wst[top]:
            total -= _block_contrib(Wst[top], Sst[top], Qst[top], theta0)
            total -= _block_contrib(Wst[top - 1], Sst[top - 1], Qst[top - 1], theta0)
            Wst[top - 1] += Wst[top]
            Sst[top - 1] += Sst[top]
            Qst[top - 1] += Qst[top]
            top -= 1
            total += _block_contrib(Wst[top], Sst[top], Qst[top], theta0)
        out[i + 1] = total
    return out


@njit(cache=True, nogil=True)
def canonical_lr(x, y, theta0, d0):
    """One-stage LR statistic with unit weights and unit variance."""
    n = y.shape[0]
    w = np.ones(n)
    split = 0
    while split < n and x[split] < d0:
        split += 1
    unc = weighted_rss(y, w, pava_fitted(y, w))
    con = weighted_rss(y, w, constrained_fitted(y, w, split, theta0))
    return con - unc


@njit(cache=True, nogil=True)
def canonical_lr_rows(u_spacings, noise, theta0, d0):
    """Canonical-model LR statistic per row.

    Row i uses order statistics built from exponential spacings
    ``u_spacings[i]`` (length n + 1) and responses ``x + noise[i]``.
    """
    reps, n = noise.shape
    out = np.empty(reps)
    x = np.empty(n)
    y = np.empty(n)
    for r in range(reps):
        total = 0.0
        for j in range(n + 1):
            total += u_spacings[r, j]
        acc = 0.0
        for j in range(n):
            acc += u_spacings[r, j]
            x[j] = acc / total
            y[j] = x[j] + noise[r, j]
        out[r] = canonical_lr(x, y, theta0, d0)
    return out
