"""Isotonic least-squares fits and threshold inversion.

A fitted :class:`StepFit` is left-closed: the level at knot ``X_i`` holds on
``[X_i, X_{i+1})``, the first level extends down to ``a`` and the last up to
``b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import EmptySample, IsoThreshError, OneSidedNull

STAGES = ("one", "two", "pooled")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def pool_ties(x, y, w):
    """Merge duplicate covariates into one point with summed weight and weighted-mean response."""
    ux, inv = np.unique(x, return_inverse=True)
    if ux.size == x.size:
        return x, y, w
    wsum = np.bincount(inv, weights=w)
    ysum = np.bincount(inv, weights=w * y)
    return ux, ysum / wsum, wsum


def jitter_ties(x, eps, rng):
    """Break ties by adding uniform noise in (-eps, eps).

    ``eps`` is shrunk to below half the smallest gap between distinct values so
    the ordering of distinct covariates is preserved.
    """
    x = np.asarray(x, dtype=float)
    ux = np.unique(x)
    if ux.size > 1:
        eps = min(eps, 0.49 * float(np.min(np.diff(ux))))
    return x + rng.uniform(-eps, eps, size=x.size)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Covariate/response pairs sorted by covariate, with positive weights.

    Build through :meth:`from_arrays`, which sorts and applies the tie policy.
    """

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    domain: tuple
    stage: str = "one"

    @classmethod
    def from_arrays(cls, x, y, w=None, domain=None, stage="one", ties="pool",
                    jitter_eps=None, rng=None):
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if x.size != y.size:
            raise IsoThreshError("x and y differ in length")
        if x.size == 0:
            raise EmptySample("sample has no points")
        w = np.ones_like(x) if w is None else np.asarray(w, dtype=float).ravel()
        if w.size != x.size:
            raise IsoThreshError("weights differ in length from x")
        if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)) or np.any(~np.isfinite(w)):
            raise IsoThreshError("non-finite values in sample")
        if np.any(w <= 0):
            raise IsoThreshError("weights must be positive")
        if stage not in STAGES:
            raise IsoThreshError(f"unknown stage {stage!r}")
        if ties == "jitter":
            if jitter_eps is None:
                raise IsoThreshError("jitter tie policy needs jitter_eps")
            rng = np.random.default_rng() if rng is None else rng
            x = jitter_ties(x, jitter_eps, rng)
        elif ties != "pool":
            raise IsoThreshError(f"unknown tie policy {ties!r}")
        order = np.argsort(x, kind="stable")
        x, y, w = x[order], y[order], w[order]
        x, y, w = pool_ties(x, y, w)
        if domain is None:
            domain = (float(x[0]), float(x[-1]))
        a, b = float(domain[0]), float(domain[1])
        if not a < b and not (a == b and x.size == 1):
            raise IsoThreshError(f"invalid domain ({a}, {b})")
        if x[0] < a or x[-1] > b:
            raise IsoThreshError("covariates fall outside the domain")
        return cls(_frozen(x), _frozen(y), _frozen(w), (a, b), stage)

    @property
    def n(self) -> int:
        return int(self.x.size)

    def __eq__(self, other):
        if not isinstance(other, SampleBatch):
            return NotImplemented
        return (self.domain == other.domain and self.stage == other.stage
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "xyw"))

    __hash__ = object.__hash__

    def combine(self, other: "SampleBatch") -> "SampleBatch":
        """Pool two batches (e.g. both stages) over the union of their domains."""
        dom = (min(self.domain[0], other.domain[0]), max(self.domain[1], other.domain[1]))
        return SampleBatch.from_arrays(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.w, other.w]),
            domain=dom,
            stage="pooled",
        )

    def with_domain(self, domain) -> "SampleBatch":
        return SampleBatch.from_arrays(self.x, self.y, self.w, domain=domain, stage=self.stage)

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "w": self.w.tolist(),
            "domain": list(self.domain),
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleBatch":
        return cls.from_arrays(d["x"], d["y"], d.get("w"), domain=d["domain"],
                               stage=d.get("stage", "one"))


class Block(NamedTuple):
    start: int
    stop: int  # exclusive
    mean: float
    weight: float


@dataclass(frozen=True, eq=False)
class StepFit:
    """Nondecreasing piecewise-constant fit with one level per knot."""

    knots: np.ndarray
    levels: np.ndarray
    blocks: tuple
    domain: tuple
    flags: tuple = field(default=())

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.knots, x, side="right") - 1
        out = self.levels[np.clip(idx, 0, self.levels.size - 1)]
        return out if out.ndim else float(out)

    def __eq__(self, other):
        if not isinstance(other, StepFit):
            return NotImplemented
        return (np.array_equal(self.knots, other.knots) and np.array_equal(self.levels, other.levels)
                and self.blocks == other.blocks and tuple(self.domain) == tuple(other.domain)
                and tuple(self.flags) == tuple(other.flags))

    __hash__ = object.__hash__

    def rss(self, sample: SampleBatch) -> float:
        return float(_kernels.weighted_rss(sample.y, sample.w, np.asarray(self.levels)))

    def to_dict(self) -> dict:
        return {
            "knots": self.knots.tolist(),
            "levels": self.levels.tolist(),
            "blocks": [list(b) for b in self.blocks],
            "domain": list(self.domain),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepFit":
        blocks = tuple(Block(int(b[0]), int(b[1]), float(b[2]), float(b[3])) for b in d["blocks"])
        return cls(_frozen(d["knots"]), _frozen(d["levels"]), blocks,
                   tuple(d["domain"]), tuple(d.get("flags", ())))


def _blocks_from(starts, means, weights, n, offset=0):
    out = []
    for j in range(len(starts)):
        stop = int(starts[j + 1]) if j + 1 < len(starts) else n
        out.append(Block(int(starts[j]) + offset, stop + offset, float(means[j]), float(weights[j])))
    return out


def _expand(blocks, n):
    levels = np.empty(n)
    for b in blocks:
        levels[b.start:b.stop] = b.mean
    return levels


def pava(sample: SampleBatch) -> StepFit:
    """Weighted least-squares projection of the responses onto nondecreasing vectors."""
    if sample.n == 0:
        raise EmptySample("sample has no points")
    starts, means, weights = _kernels.pava_blocks(sample.y, sample.w)
    blocks = _blocks_from(starts, means, weights, sample.n)
    return StepFit(sample.x, _frozen(_expand(blocks, sample.n)), tuple(blocks), sample.domain)


def split_index(sample: SampleBatch, d0: float) -> int:
    """Number of sample points with covariate < d0."""
    return int(np.searchsorted(sample.x, d0, side="left"))


def constrained_pava(sample: SampleBatch, d0: float, theta0: float) -> StepFit:
    """Monotone fit constrained to sit at or below theta0 up to d0 and at or above it after.

    Points with ``x < d0`` get ``min(PAVA(left), theta0)``; points with
    ``x >= d0`` get ``max(PAVA(right), theta0)``. When one side has no data a
    :class:`OneSidedNull` warning is issued and the fit is flagged.
    """
    if sample.n == 0:
        raise EmptySample("sample has no points")
    a, b = sample.domain
    if not a < d0 < b:
        raise IsoThreshError(f"d0={d0} not inside the domain ({a}, {b})")
    k = split_index(sample, d0)
    n = sample.n
    flags = ()
    blocks = []
    if k > 0:
        s, m, wt = _kernels.pava_blocks(sample.y[:k], sample.w[:k])
        blocks += [b._replace(mean=min(b.mean, theta0)) for b in _blocks_from(s, m, wt, k)]
    if k < n:
        s, m, wt = _kernels.pava_blocks(sample.y[k:], sample.w[k:])
        blocks += [b._replace(mean=max(b.mean, theta0)) for b in _blocks_from(s, m, wt, n - k, offset=k)]
    if k == 0 or k == n:
        side = "left" if k == 0 else "right"
        warnings.warn(f"no data on the {side} of d0={d0}; that side is held at theta0",
                      OneSidedNull, stacklevel=2)
        flags = ("one-sided-null",)
    return StepFit(sample.x, _frozen(_expand(blocks, n)), tuple(blocks), sample.domain, flags)


def invert_threshold(fit: StepFit, theta0: float) -> float:
    """``inf{x in [a, b] : fit(x) >= theta0}`` with ``inf{} = b``."""
    levels = np.asarray(fit.levels)
    if levels.size == 0:
        raise EmptySample("empty fit")
    hit = np.flatnonzero(levels >= theta0)
    if hit.size == 0:
        return float(fit.domain[1])
    i = int(hit[0])
    if i == 0:
        return float(fit.domain[0])
    return float(fit.knots[i])


def argmin_process(sample: SampleBatch):
    """Cumulative-sum processes at the sample points.

    Returns ``(V, G)`` where ``V[j]`` is the normalised weighted response sum
    and ``G[j]`` the normalised weight sum over the first ``j + 1`` points.
    """
    W = float(np.sum(sample.w))
    V = np.cumsum(sample.w * sample.y) / W
    G = np.cumsum(sample.w) / W
    return V, G


def argmin_diagnostic(sample: SampleBatch, s: float, tie: str = "left") -> float:
    """Location of the minimiser of ``V_n(x) - s * G_n(x)``.

    Candidates are the origin (value 0, located at the domain's lower end ``a``)
    and every sample point. With the default leftmost tie-break, for every
    sample point ``t`` (and ``a < X_1``)::

        fit(t) <  s  <=>  argmin >= t

    and with ``tie="right"`` the same holds with ``<=`` on the left. For ``s``
    that is not a fitted level the two coincide.
    """
    if sample.n == 0:
        raise EmptySample("sample has no points")
    if tie not in ("left", "right"):
        raise IsoThreshError(f"unknown tie rule {tie!r}")
    wy = sample.w * sample.y
    vals = np.concatenate([[0.0], np.cumsum(wy) - s * np.cumsum(sample.w)])
    # values within rounding error of the minimum are ties: when s is a fitted
    # level the process is exactly flat across that block
    scale = float(np.sum(np.abs(wy)) + abs(s) * np.sum(sample.w))
    tied = np.flatnonzero(vals <= vals.min() + 64 * np.finfo(float).eps * scale)
    j = int(tied[0] if tie == "left" else tied[-1])
    return float(sample.domain[0]) if j == 0 else float(sample.x[j - 1])
