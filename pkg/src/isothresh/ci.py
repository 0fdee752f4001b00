"""Wald and likelihood-ratio confidence intervals for the threshold."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptySample, InvalidPlan, IsoThreshError
from .iso_core import SampleBatch, constrained_pava, invert_threshold, pava
from .nuisance import NuisanceEstimates

FAMILIES = ("wald1", "wald2", "lr", "local_linear")


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    family: str
    level: float
    domain: tuple
    nuisance: NuisanceEstimates | None = None
    diagnostics: tuple = field(default=())
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise IsoThreshError(f"unknown interval family {self.family!r}")
        a, b = self.domain
        if not (a <= self.lower <= self.upper <= b):
            raise IsoThreshError(f"interval [{self.lower}, {self.upper}] outside domain {self.domain}")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lower": self.lower,
            "upper": self.upper,
            "family": self.family,
            "level": self.level,
            "domain": list(self.domain),
            "nuisance": None if self.nuisance is None else self.nuisance.to_dict(),
            "diagnostics": list(self.diagnostics),
            "inputs": self.inputs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntervalEstimate":
        nuis = d.get("nuisance")
        return cls(
            point=float(d["point"]),
            lower=float(d["lower"]),
            upper=float(d["upper"]),
            family=d["family"],
            level=float(d["level"]),
            domain=tuple(d["domain"]),
            nuisance=None if nuis is None else NuisanceEstimates.from_dict(nuis),
            diagnostics=tuple(d.get("diagnostics", ())),
            inputs=dict(d.get("inputs", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _clip(point, half, domain, flags):
    a, b = domain
    lo, hi = point - half, point + half
    if lo < a or hi > b:
        flags.append("clipped-to-domain")
    lo, hi = max(lo, a), min(hi, b)
    if lo <= a and hi >= b:
        flags.append("whole-domain")
    return lo, hi


def wald_ci_one_stage(d, n, c_hat, g_at_d, z_quantile, domain, level=0.95,
                      nuisance=None) -> IntervalEstimate:
    """``d +/- n^(-1/3) * c_hat * g(d)^(-1/3) * z``, clipped to the domain."""
    if n < 1 or not c_hat > 0 or not g_at_d > 0:
        raise IsoThreshError("need n >= 1, c_hat > 0 and g_at_d > 0")
    half = n ** (-1.0 / 3.0) * c_hat * g_at_d ** (-1.0 / 3.0) * z_quantile
    flags = []
    lo, hi = _clip(d, half, domain, flags)
    inputs = {"n": n, "c_hat": c_hat, "g_at_d": g_at_d, "z_quantile": z_quantile,
              "half_width": half}
    return IntervalEstimate(float(d), lo, hi, "wald1", level, tuple(domain), nuisance,
                            tuple(flags), inputs)


def two_stage_constant(base_c, c1, p, gamma1, psi0) -> float:
    """Scale of the stage-two estimator: ``base_c * (c1 / ((1-p) p^gamma1 psi0))^(1/3)``."""
    if not 0 < p < 1:
        raise InvalidPlan(f"p must lie in (0, 1), got {p}")
    if not 0 <= gamma1 <= 1.0 / 3.0:
        raise InvalidPlan(f"gamma1 must lie in [0, 1/3], got {gamma1}")
    if not psi0 > 0 or not c1 > 0 or not base_c > 0:
        raise InvalidPlan("psi0, c1 and base_c must be positive")
    return base_c * (c1 / ((1.0 - p) * p**gamma1 * psi0)) ** (1.0 / 3.0)


def wald_ci_two_stage(d2, n, base_c, c1, p, gamma1, psi0, z_quantile, domain, level=0.95,
                      nuisance=None) -> IntervalEstimate:
    """``d2 +/- n^(-(1+gamma1)/3) * C2 * z`` with the stage-two constant C2."""
    c2 = two_stage_constant(base_c, c1, p, gamma1, psi0)
    half = n ** (-(1.0 + gamma1) / 3.0) * c2 * z_quantile
    flags = []
    lo, hi = _clip(d2, half, domain, flags)
    inputs = {"n": n, "base_c": base_c, "c1": c1, "p": p, "gamma1": gamma1, "psi0": psi0,
              "z_quantile": z_quantile, "c2": c2, "half_width": half}
    return IntervalEstimate(float(d2), lo, hi, "wald2", level, tuple(domain), nuisance,
                            tuple(flags), inputs)


def lr_stat(sample: SampleBatch, theta0: float, d0: float, sigma2: float) -> float:
    """``(RSS(constrained) - RSS(unconstrained)) / sigma2`` for the hypothesis m^-1(theta0) = d0."""
    if sample.n == 0:
        raise EmptySample("sample has no points")
    if not sigma2 > 0:
        raise IsoThreshError("sigma2 must be positive")
    f_u = np.asarray(pava(sample).levels)
    f_c = np.asarray(constrained_pava(sample, d0, theta0).levels)
    # residuals differenced point by point: (y - f_c)^2 - (y - f_u)^2 without
    # cancelling two large sums
    terms = sample.w * (f_u - f_c) * (2.0 * sample.y - f_c - f_u)
    return max(math.fsum(terms.tolist()), 0.0) / sigma2


def lr_block_form(sample: SampleBatch, theta0: float, d0: float, sigma2: float) -> float:
    """The same statistic written as ``sum[(m_I - theta0)^2 - (m_Ic - theta0)^2] / sigma2``."""
    m_i = np.asarray(pava(sample).levels)
    m_c = np.asarray(constrained_pava(sample, d0, theta0).levels)
    diff = m_i != m_c
    terms = sample.w[diff] * ((m_i[diff] - theta0) ** 2 - (m_c[diff] - theta0) ** 2)
    return float(np.sum(terms)) / sigma2


def lr_profile(sample: SampleBatch, theta0: float, sigma2: float) -> np.ndarray:
    """Statistic for every split 0..n (split k: the first k points lie strictly left of d0).

    One left-to-right and one right-to-left PAVA sweep; O(n) overall.
    """
    y, w = sample.y, sample.w
    unc = _kernels.weighted_rss(y, w, _kernels.pava_fitted(y, w))
    left = _kernels.capped_prefix_rss(y, w, theta0)
    right = _kernels.capped_prefix_rss(-y[::-1].copy(), w[::-1].copy(), -theta0)
    stats = (left + right[::-1] - unc) / sigma2
    return np.maximum(stats, 0.0)


class _SplitStatistic:
    """Memoised statistic as a function of the hypothesised threshold.

    The constrained fit depends on d0 only through how many points lie at or
    left of it, so evaluations are cached per split.
    """

    def __init__(self, sample, theta0, sigma2, method):
        self.x = sample.x
        self.y, self.w = sample.y, sample.w
        self.theta0, self.sigma2 = theta0, sigma2
        self.unc = _kernels.weighted_rss(self.y, self.w, _kernels.pava_fitted(self.y, self.w))
        self.cache = {}
        if method == "sweep":
            prof = lr_profile(sample, theta0, sigma2)
            self.cache = dict(enumerate(prof.tolist()))
        elif method != "grid":
            raise IsoThreshError(f"unknown LR inversion method {method!r}")

    def splits(self, xs):
        return np.searchsorted(self.x, xs, side="left")

    def evaluate_splits(self, splits):
        todo = np.array(sorted({int(k) for k in splits} - self.cache.keys()), dtype=np.int64)
        if todo.size:
            rss = _kernels.constrained_rss_at_splits(self.y, self.w, self.theta0, todo)
            for k, r in zip(todo.tolist(), rss.tolist()):
                self.cache[k] = max(r - self.unc, 0.0) / self.sigma2
        return np.array([self.cache[int(k)] for k in splits])

    def __call__(self, xs):
        return self.evaluate_splits(self.splits(np.atleast_1d(xs)))


def _bisect(stat, accepted_x, rejected_x, q, tol):
    while abs(accepted_x - rejected_x) > tol:
        mid = 0.5 * (accepted_x + rejected_x)
        if stat(mid)[0] <= q:
            accepted_x = mid
        else:
            rejected_x = mid
    return accepted_x


def lr_ci(sample: SampleBatch, theta0: float, sigma2: float, d_quantile: float, domain=None,
          grid_size: int = 2001, level: float = 0.95, method: str = "grid",
          nuisance=None, family: str = "lr") -> IntervalEstimate:
    """Invert the LR test over a uniform grid on the domain plus the point estimate.

    The accepted set ``{x : stat(x) <= d_quantile}`` is reported as its hull
    with endpoints refined by bisection to ``1e-6 * (b - a)``. Flags:
    ``non-interval-region`` when accepted grid points are not contiguous,
    ``whole-domain`` when every grid point is accepted, and ``empty-region``
    (degenerate interval at the grid minimiser) when none is.

    ``method="grid"`` refits the constrained problem per distinct split;
    ``method="sweep"`` reads all splits from :func:`lr_profile`.
    """
    if grid_size < 101:
        raise IsoThreshError("grid_size must be at least 101")
    if not sigma2 > 0:
        raise IsoThreshError("sigma2 must be positive")
    a, b = sample.domain if domain is None else (float(domain[0]), float(domain[1]))
    stat = _SplitStatistic(sample, theta0, sigma2, method)
    point = invert_threshold(pava(sample), theta0)
    grid = np.linspace(a, b, grid_size)
    if a < point < b:
        # the statistic is zero at the point estimate, which may sit on a
        # piece narrower than the grid step
        grid = np.insert(grid, int(np.searchsorted(grid, point)), point)
    values = stat(grid)
    ok = np.flatnonzero(values <= d_quantile)
    flags = []
    tol = 1e-6 * (b - a)
    if ok.size == 0:
        flags.append("empty-region")
        lo = hi = float(grid[int(np.argmin(values))])
    else:
        i0, i1 = int(ok[0]), int(ok[-1])
        if ok.size != i1 - i0 + 1:
            flags.append("non-interval-region")
        lo = float(grid[i0]) if i0 == 0 else _bisect(stat, grid[i0], grid[i0 - 1], d_quantile, tol)
        if i1 == grid.size - 1:
            hi = float(grid[i1])
        else:
            rej = float(grid[i1 + 1])
            hi = _bisect(stat, grid[i1], rej, d_quantile, tol)
            # the statistic is constant on (X_(i-1), X_(i)], so the supremum
            # of the region is attained at a sample point
            j = int(np.searchsorted(sample.x, hi, side="left"))
            if j < sample.n and sample.x[j] < rej:
                hi = float(sample.x[j])
        if i0 == 0 and i1 == grid.size - 1:
            flags.append("whole-domain")
    inputs = {"n": sample.n, "theta0": theta0, "sigma2": sigma2, "d_quantile": d_quantile,
              "grid_size": grid_size, "method": method}
    return IntervalEstimate(point, lo, hi, family, level, (a, b), nuisance, tuple(flags), inputs)
