"""Quantile tables for the Chernoff variable Z and the universal LR limit D.

Both tabulators split the Monte Carlo work into fixed-size chunks, each drawn
from its own Philox stream keyed by ``(seed, chunk index)``. Results are
therefore identical for any number of worker threads.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import _kernels
from .errors import GridTooNarrow, IsoThreshError, QuantileOutOfRange

TABLE_FORMAT_VERSION = 1

DEFAULT_PROBS = tuple(
    [0.001, 0.0025, 0.005, 0.0075]
    + [round(0.01 * k, 2) for k in range(1, 100)]
    + [0.9925, 0.995, 0.9975, 0.999]
)

# Round constants used for the stage-one sampling interval at beta = 0.01.
PAPER_CONSERVATIVE = {"Z": {0.995: 2.0}, "D": {0.99: 4.0}}

CHUNK = 1000


def stream(seed: int, *counter: int) -> np.random.Generator:
    """Counter-based generator for the stream addressed by ``(seed, *counter)``."""
    key = np.zeros(2, dtype=np.uint64)
    key[0] = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    h = 0
    for c in counter:
        h = (h * 1_000_003 + int(c) + 1) & 0xFFFFFFFFFFFFFFFF
    key[1] = np.uint64(h)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class LimitQuantiles:
    dist: str
    probs: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dist not in ("Z", "D"):
            raise IsoThreshError(f"unknown distribution {self.dist!r}")
        probs = np.asarray(self.probs, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if probs.shape != values.shape or probs.ndim != 1:
            raise IsoThreshError("probs and values must be 1-d and equal length")
        if np.any(np.diff(probs) <= 0):
            raise IsoThreshError("probs must be strictly increasing")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "values", values)

    def quantile(self, p: float) -> float:
        return quantile(self, p)

    def to_dict(self) -> dict:
        return {
            "version": TABLE_FORMAT_VERSION,
            "dist": self.dist,
            "probs": self.probs.tolist(),
            "values": self.values.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LimitQuantiles":
        if d.get("version") != TABLE_FORMAT_VERSION:
            raise IsoThreshError(f"unsupported table version {d.get('version')!r}")
        return cls(d["dist"], np.array(d["probs"]), np.array(d["values"]), dict(d.get("meta", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "LimitQuantiles":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def cache_key(self) -> str:
        return cache_key(self.dist, self.meta)


def cache_key(dist: str, meta: dict) -> str:
    payload = json.dumps({"dist": dist, **{k: meta[k] for k in sorted(meta) if k != "created"}},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def quantile(table: LimitQuantiles, p: float) -> float:
    """Piecewise-linear interpolation of the tabulated quantile function."""
    if not table.probs[0] <= p <= table.probs[-1]:
        raise QuantileOutOfRange(
            f"p={p} outside tabulated range [{table.probs[0]}, {table.probs[-1]}]")
    return float(np.interp(p, table.probs, table.values))


def _empirical(samples, probs):
    values = np.quantile(samples, probs, method="linear")
    # enforce strict monotonicity against flat stretches of a discrete sample
    return np.maximum.accumulate(values + np.arange(len(probs)) * 1e-12)


def _map_chunks(fn, n_chunks, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, range(n_chunks)))
    return [fn(i) for i in range(n_chunks)]


def _chernoff_chunk(seed, idx, size, m, step):
    rng = stream(seed, idx)
    t = np.arange(1, m + 1) * step
    drift = t * t
    scale = np.sqrt(step)
    right = np.cumsum(rng.standard_normal((size, m)), axis=1) * scale + drift
    left = np.cumsum(rng.standard_normal((size, m)), axis=1) * scale + drift
    best_r = np.argmin(right, axis=1)
    best_l = np.argmin(left, axis=1)
    vr = right[np.arange(size), best_r]
    vl = left[np.arange(size), best_l]
    loc = np.where(vr < vl, t[best_r], -t[best_l])
    val = np.minimum(vr, vl)
    loc = np.where(val < 0.0, loc, 0.0)
    edge = ((vr < vl) & (best_r == m - 1)) | ((vl <= vr) & (best_l == m - 1))
    return loc, int(np.count_nonzero(edge & (val < 0.0)))


def simulate_chernoff(paths=200_000, half_width=3.0, step=0.002, seed=20240601, threads=1):
    """Argmin locations of two-sided Brownian motion plus t^2 on a uniform grid."""
    m = int(round(half_width / step))
    n_chunks = -(-paths // CHUNK)

    def work(i):
        size = min(CHUNK, paths - i * CHUNK)
        return _chernoff_chunk(seed, i, size, m, step)

    parts = _map_chunks(work, n_chunks, threads)
    locs = np.concatenate([p[0] for p in parts])
    edges = sum(p[1] for p in parts)
    return locs, edges


def tabulate_chernoff(paths=200_000, half_width=3.0, step=0.002, seed=20240601,
                      probs=DEFAULT_PROBS, threads=1) -> LimitQuantiles:
    """Monte Carlo quantiles of argmin_t {W(t) + t^2}."""
    if paths < 100_000 or half_width < 2 or step > 0.01:
        raise IsoThreshError("need paths >= 1e5, half_width >= 2 and step <= 0.01")
    locs, edges = simulate_chernoff(paths, half_width, step, seed, threads)
    if edges > 0.001 * paths:
        raise GridTooNarrow(f"{edges} of {paths} argmins hit the grid boundary")
    meta = {"paths": int(paths), "half_width": float(half_width), "step": float(step),
            "seed": int(seed), "boundary_hits": int(edges)}
    return LimitQuantiles("Z", np.array(probs), _empirical(locs, np.array(probs)), meta)


def simulate_d(outer=100_000, inner_n=5000, seed=20240602, threads=1):
    """Canonical-model LR statistics: m(x) = x, theta0 = d0 = 0.5, sigma = 1, uniform design."""
    n_chunks = -(-outer // CHUNK)

    def work(i):
        size = min(CHUNK, outer - i * CHUNK)
        rng = stream(seed, i)
        spacings = rng.standard_exponential((size, inner_n + 1))
        noise = rng.standard_normal((size, inner_n))
        return _kernels.canonical_lr_rows(spacings, noise, 0.5, 0.5)

    return np.concatenate(_map_chunks(work, n_chunks, threads))


def tabulate_d(outer=100_000, inner_n=5000, seed=20240602, probs=DEFAULT_PROBS,
               threads=1) -> LimitQuantiles:
    """Quantiles of D through its finite-sample surrogate, the one-stage LR statistic.

    At ``inner_n`` points the surrogate carries a small finite-sample bias
    relative to the limit law.
    """
    if outer < 10_000 or inner_n < 2000:
        raise IsoThreshError("need outer >= 1e4 and inner_n >= 2000")
    stats = simulate_d(outer, inner_n, seed, threads)
    meta = {"outer": int(outer), "inner_n": int(inner_n), "seed": int(seed)}
    return LimitQuantiles("D", np.array(probs), _empirical(stats, np.array(probs)), meta)


_EMBEDDED = {}


def embedded_table(dist: str) -> LimitQuantiles:
    """The canonical table shipped with the package."""
    if dist not in _EMBEDDED:
        name = {"Z": "chernoff.json", "D": "lr_limit.json"}[dist]
        text = resources.files("isothresh").joinpath("data", name).read_text(encoding="utf-8")
        _EMBEDDED[dist] = LimitQuantiles.from_dict(json.loads(text))
    return _EMBEDDED[dist]


class QuantileSource:
    """Resolves ``(dist, p)`` to a number from tables, with optional conservative presets.

    With ``preset="paper_conservative"`` the round constants (2 for Z at 0.995,
    4 for D at 0.99) take precedence at exactly those probabilities.
    """

    def __init__(self, z_table=None, d_table=None, preset="paper_conservative"):
        self.tables = {"Z": z_table, "D": d_table}
        self.preset = preset

    def __call__(self, dist: str, p: float) -> float:
        if self.preset == "paper_conservative":
            for prob, value in PAPER_CONSERVATIVE[dist].items():
                if abs(p - prob) < 1e-12:
                    return value
        elif self.preset not in (None, "tabulated"):
            raise IsoThreshError(f"unknown quantile preset {self.preset!r}")
        table = self.tables[dist] or embedded_table(dist)
        return quantile(table, p)


def default_quantiles() -> QuantileSource:
    return QuantileSource()


def _main():  # regenerate the embedded tables
    import argparse

    ap = argparse.ArgumentParser(description="regenerate the embedded limit tables")
    ap.add_argument("--out", default=str(resources.files("isothresh").joinpath("data")))
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    tabulate_chernoff(threads=args.threads).save(f"{args.out}/chernoff.json")
    tabulate_d(threads=args.threads).save(f"{args.out}/lr_limit.json")


if __name__ == "__main__":
    _main()
