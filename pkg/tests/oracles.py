"""Brute-force reference implementations used as test oracles.

Each works from first principles (enumeration over block partitions) and
shares no code with the package.
"""

import itertools
import math


def partitions(n):
    """All ways to cut range(n) into consecutive blocks, as lists of (start, stop)."""
    for cuts in itertools.product((False, True), repeat=n - 1):
        blocks, start = [], 0
        for i, cut in enumerate(cuts, start=1):
            if cut:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        yield blocks


def _block_mean(y, w, lo, hi):
    sw = math.fsum(w[lo:hi])
    return math.fsum(wi * yi for wi, yi in zip(w[lo:hi], y[lo:hi])) / sw


def _rss(y, w, fitted):
    return math.fsum(wi * (yi - fi) ** 2 for yi, wi, fi in zip(y, w, fitted))


def brute_isotonic(y, w, cap=None, floor=None):
    """Weighted least-squares nondecreasing fit, optionally bounded by cap/floor.

    Every partition into consecutive blocks is tried with each block set to
    its weighted mean clipped to [floor, cap]; the best feasible candidate is
    the projection (the optimum is always one of these candidates).
    """
    n = len(y)
    if n == 0:
        return [], 0.0
    best, best_rss = None, math.inf
    for blocks in partitions(n):
        fitted = []
        for lo, hi in blocks:
            m = _block_mean(y, w, lo, hi)
            if cap is not None:
                m = min(m, cap)
            if floor is not None:
                m = max(m, floor)
            fitted += [m] * (hi - lo)
        if any(b < a - 1e-15 for a, b in zip(fitted, fitted[1:])):
            continue
        r = _rss(y, w, fitted)
        if r < best_rss - 1e-15:
            best, best_rss = fitted, r
    return best, best_rss


def brute_constrained(y, w, k, theta0):
    """Constrained fit: first k points at most theta0, the rest at least theta0."""
    left, rl = brute_isotonic(y[:k], w[:k], cap=theta0)
    right, rr = brute_isotonic(y[k:], w[k:], floor=theta0)
    return left + right, rl + rr


def brute_threshold(x, levels, theta0, a, b):
    """First covariate whose fitted level reaches theta0 (a for the first point, b if none)."""
    for i, lev in enumerate(levels):
        if lev >= theta0:
            return a if i == 0 else x[i]
    return b
