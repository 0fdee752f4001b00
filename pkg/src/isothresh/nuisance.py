"""Nuisance estimates for the Wald intervals: noise variance, local slope, scale constant."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BandwidthExhausted, FlatDerivative, IsoThreshError, PilotDegenerate, TooFewPoints
from .iso_core import SampleBatch

# Asymptotic-MSE bandwidth constant for the first derivative from a local
# quadratic fit with the Epanechnikov kernel K(t) = 3/4 (1 - t^2):
#   equivalent kernel       K*(t) = 5 t K(t)
#   int K*^2 = 15/7,        int t^3 K* = 3/7
#   C = [ (3!)^2 * 3 * (15/7) / (2 * 2 * (3/7)^2) ]^(1/7) = 315^(1/7)
LOCAL_QUADRATIC_BANDWIDTH_CONSTANT = 315.0 ** (1.0 / 7.0)

POOL_THRESHOLD = 200


@dataclass(frozen=True)
class NuisanceEstimates:
    sigma2: float
    deriv_at: float
    deriv: float
    bandwidth: float
    source_stage: str = "one"
    density: float = float("nan")
    flags: tuple = field(default=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceEstimates":
        d = dict(d)
        d["flags"] = tuple(d.get("flags", ()))
        return cls(**d)


def variance_gasser(sample: SampleBatch) -> float:
    """Difference-based noise variance from local linear-interpolation residuals.

    Each interior point is compared with the line through its two neighbours;
    the squared pseudo-residuals are normalised by their variance factor
    ``a_i^2 + b_i^2 + 1`` and averaged over the ``n - 2`` interior points.
    """
    x, y = sample.x, sample.y
    n = x.size
    if n < 3:
        raise TooFewPoints(f"variance estimate needs at least 3 points, got {n}")
    span = x[2:] - x[:-2]
    a = (x[2:] - x[1:-1]) / span
    b = (x[1:-1] - x[:-2]) / span
    resid = a * y[:-2] + b * y[2:] - y[1:-1]
    return float(math.fsum(resid**2 / (a**2 + b**2 + 1.0)) / (n - 2))


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


def derivative_local_quadratic(sample: SampleBatch, x0: float, bandwidth=None,
                               design_density=None) -> float:
    """Slope at ``x0`` from a kernel-weighted local quadratic least-squares fit.

    When ``bandwidth`` is None the rule-of-thumb bandwidth is used. A window
    holding fewer than 4 points is widened by 1.5 up to five times.
    """
    return _local_quadratic(sample, x0, bandwidth, design_density)[0]


def _local_quadratic(sample, x0, bandwidth, design_density):
    if bandwidth is None:
        bandwidth = rule_of_thumb_bandwidth(sample, x0, design_density=design_density)
    h = float(bandwidth)
    if not h > 0:
        raise IsoThreshError("bandwidth must be positive")
    dx = sample.x - x0
    for widen in range(6):
        kw = epanechnikov(dx / h)
        if np.count_nonzero(kw) >= 4:
            break
        if widen == 5:
            raise BandwidthExhausted(f"fewer than 4 points within {h:.4g} of {x0}")
        h *= 1.5
    sw = np.sqrt(kw * sample.w)
    X = np.column_stack([np.ones_like(dx), dx, dx * dx]) * sw[:, None]
    beta, *_ = np.linalg.lstsq(X, sample.y * sw, rcond=None)
    return float(beta[1]), h, widen > 0


@dataclass(frozen=True)
class Pilot:
    sigma2: float
    density: float
    third_deriv: float
    density_source: str

    @property
    def degenerate(self) -> bool:
        return self.third_deriv == 0.0


def histogram_density(sample: SampleBatch, x0: float) -> float:
    a, b = sample.domain
    bins = max(1, int(math.ceil(math.sqrt(sample.n))))
    counts, edges = np.histogram(sample.x, bins=bins, range=(a, b), weights=sample.w)
    j = min(max(int(np.searchsorted(edges, x0, side="right")) - 1, 0), bins - 1)
    return float(counts[j] / (np.sum(sample.w) * (edges[j + 1] - edges[j])))


def pilot_estimates(sample: SampleBatch, x0: float, design_density=None) -> Pilot:
    """Variance, design density and third derivative feeding the bandwidth rule.

    The third derivative comes from a global quartic fit; values below
    ``1e-8 * range(y) / range(x)**3`` are treated as zero.
    """
    a, b = sample.domain
    span = b - a
    u = (sample.x - a) / span
    coef = np.polynomial.polynomial.polyfit(u, sample.y, 4, w=np.sqrt(sample.w))
    u0 = (x0 - a) / span
    m3 = (6.0 * coef[3] + 24.0 * coef[4] * u0) / span**3
    yr = float(np.ptp(sample.y)) or 1.0
    if abs(m3) <= 1e-8 * yr / span**3:
        m3 = 0.0
    if design_density is not None:
        g = float(design_density(x0)) if callable(design_density) else float(design_density)
        src = "known"
    else:
        g = histogram_density(sample, x0)
        src = "histogram"
    return Pilot(variance_gasser(sample), g, float(m3), src)


def rule_of_thumb_bandwidth(sample: SampleBatch, x0: float, design_density=None,
                            pilot: Pilot | None = None, warn: bool = True) -> float:
    """Plug-in asymptotically MSE-optimal bandwidth for the local quadratic slope.

    ``h = C * [sigma2 / (n * g(x0) * m'''(x0)^2)]^(1/7)`` clamped to
    ``[(b - a) / n^(6/7), (b - a) / 2]``. A degenerate pilot (zero third
    derivative or zero density) yields the upper clamp; check
    :attr:`Pilot.degenerate` to detect it.
    """
    n = sample.n
    if n < 8:
        raise TooFewPoints(f"bandwidth rule needs at least 8 points, got {n}")
    if pilot is None:
        pilot = pilot_estimates(sample, x0, design_density)
    a, b = sample.domain
    lo, hi = (b - a) / n ** (6.0 / 7.0), (b - a) / 2.0
    if pilot.degenerate or pilot.density <= 0.0:
        if warn:
            warnings.warn(f"degenerate pilot at x0={x0}; using the upper clamp {hi:.4g}",
                          PilotDegenerate, stacklevel=2)
        return hi
    h = LOCAL_QUADRATIC_BANDWIDTH_CONSTANT * (
        pilot.sigma2 / (n * pilot.density * pilot.third_deriv**2)
    ) ** (1.0 / 7.0)
    return float(min(max(h, lo), hi))


def wald_constant(sigma2: float, deriv: float, deriv_floor: float = 0.0) -> float:
    """``(4 sigma^2 / m'^2)^(1/3)``; raises :class:`FlatDerivative` when m' <= floor."""
    if not sigma2 > 0:
        raise IsoThreshError(f"sigma2 must be positive, got {sigma2}")
    if not deriv > max(deriv_floor, 0.0):
        raise FlatDerivative(f"slope estimate {deriv:.4g} is not above the floor {deriv_floor:.3g}")
    return (4.0 * sigma2 / deriv**2) ** (1.0 / 3.0)


def sigma2_floor(sample: SampleBatch) -> float:
    return 1e-12 * float(np.var(sample.y)) or 1e-300


def deriv_floor(sample: SampleBatch) -> float:
    xr = float(np.ptp(sample.x)) or float(sample.domain[1] - sample.domain[0])
    return 1e-8 * float(np.ptp(sample.y)) / xr


def estimate_sigma2(sample: SampleBatch) -> float:
    return max(variance_gasser(sample), sigma2_floor(sample))


def estimate_nuisance(sample: SampleBatch, at: float, design_density=None, bandwidth=None,
                      source_stage=None) -> NuisanceEstimates:
    """Variance and slope at ``at`` with floors applied and provenance flags."""
    flags = []
    pilot = None
    if bandwidth is None:
        pilot = pilot_estimates(sample, at, design_density)
        bandwidth = rule_of_thumb_bandwidth(sample, at, pilot=pilot, warn=False)
        if pilot.degenerate:
            flags.append("pilot-degenerate")
        flags.append(f"density-{pilot.density_source}")
        density = pilot.density
    else:
        density = (float(design_density(at)) if callable(design_density) else
                   float(design_density) if design_density is not None else
                   histogram_density(sample, at))
        flags.append("density-known" if design_density is not None else "density-histogram")
    slope, h, widened = _local_quadratic(sample, at, bandwidth, None)
    if widened:
        flags.append("bandwidth-widened")
    raw = variance_gasser(sample)
    floor = sigma2_floor(sample)
    if raw < floor:
        flags.append("sigma2-floored")
    return NuisanceEstimates(
        sigma2=max(raw, floor),
        deriv_at=float(at),
        deriv=slope,
        bandwidth=h,
        source_stage=source_stage or sample.stage,
        density=density,
        flags=tuple(flags),
    )
