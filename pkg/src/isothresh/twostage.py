"""Adaptive two-stage design: budget split, stage-two interval, orchestration.

Stage one spends ``n1 = floor(n p)`` points over the whole domain, and a
high-probability interval for the threshold becomes the stage-two sampling
interval ``[L1, U1]``. Stage two spends the remaining ``n2`` points there with
density ``psi`` rescaled to the interval, and the final interval comes from
the stage-two (or pooled) data.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple

import numpy as np

from .ci import IntervalEstimate, lr_ci, wald_ci_one_stage, wald_ci_two_stage
from .errors import (
    BudgetExceedsPopulation,
    IntervalTooNarrow,
    InvalidPlan,
    InvalidSlack,
    IsoThreshError,
    MissingNuisance,
)
from .iso_core import SampleBatch, invert_threshold, pava
from .limit_dist import QuantileSource, default_quantiles
from .nuisance import (
    POOL_THRESHOLD,
    NuisanceEstimates,
    deriv_floor,
    estimate_nuisance,
    estimate_sigma2,
    wald_constant,
)


@dataclass(frozen=True)
class Psi:
    """Stage-two shape density on [-1, 1]."""

    name: str
    density: Callable
    draw: Callable  # (rng, size) -> values in [-1, 1]

    @property
    def at_zero(self) -> float:
        return float(self.density(0.0))


def _tri_draw(rng, size):
    return rng.triangular(-1.0, 0.0, 1.0, size)


def _epa_draw(rng, size):
    # median of three uniforms has the Epanechnikov law
    return np.median(rng.uniform(-1.0, 1.0, (size, 3)), axis=1)


PSI = {
    "uniform": Psi("uniform", lambda u: 0.5 * (abs(u) <= 1), lambda rng, k: rng.uniform(-1.0, 1.0, k)),
    "triangular": Psi("triangular", lambda u: max(1.0 - abs(u), 0.0), _tri_draw),
    "epanechnikov": Psi("epanechnikov", lambda u: max(0.75 * (1.0 - u * u), 0.0), _epa_draw),
}


def get_psi(psi) -> Psi:
    if isinstance(psi, Psi):
        return psi
    try:
        return PSI[psi]
    except KeyError:
        raise InvalidPlan(f"unknown stage-two density {psi!r}") from None


# --- sampling oracles -------------------------------------------------------


class SimulationOracle:
    """Draws ``y = m(x) + N(0, sigma^2)`` with x from the requested design."""

    mode = "simulate"

    def __init__(self, m, sigma, rng, domain=(0.0, 1.0)):
        self.m, self.sigma, self.rng = m, float(sigma), rng
        self.domain = (float(domain[0]), float(domain[1]))

    def sample(self, interval, count, psi=None, stage="one") -> SampleBatch:
        lo, hi = float(interval[0]), float(interval[1])
        if psi is None or get_psi(psi).name == "uniform":
            x = self.rng.uniform(lo, hi, count)
        else:
            x = 0.5 * (lo + hi) + 0.5 * (hi - lo) * get_psi(psi).draw(self.rng, count)
        y = self.m(x) + self.sigma * self.rng.standard_normal(count)
        return SampleBatch.from_arrays(x, y, domain=(lo, hi), stage=stage)


class PopulationOracle:
    """Budgeted sampling from a finite population by nearest-covariate matching.

    Targets are equally spaced over the requested interval (``"equispaced"``)
    or uniform draws (``"random"``). Each target takes the nearest population
    point not yet used, ties going to the lower covariate, restricted to the
    interval.
    """

    mode = "population"

    def __init__(self, population: SampleBatch, targets="equispaced", rng=None):
        if targets not in ("equispaced", "random"):
            raise IsoThreshError(f"unknown target scheme {targets!r}")
        if targets == "random" and rng is None:
            raise IsoThreshError("random targets need an rng")
        self.population = population
        self.targets, self.rng = targets, rng
        self.available = np.ones(population.n, dtype=bool)
        self.domain = population.domain

    def _targets(self, lo, hi, count):
        if self.targets == "random":
            return np.sort(self.rng.uniform(lo, hi, count))
        if count == 1:
            return np.array([0.5 * (lo + hi)])
        return np.linspace(lo, hi, count)

    def sample(self, interval, count, psi=None, stage="one") -> SampleBatch:
        lo, hi = float(interval[0]), float(interval[1])
        px = self.population.x
        inside = self.available & (px >= lo) & (px <= hi)
        if np.count_nonzero(inside) < count:
            raise BudgetExceedsPopulation(
                f"{count} points requested but {np.count_nonzero(inside)} available in [{lo}, {hi}]")
        chosen = []
        for t in self._targets(lo, hi, count):
            idx = np.flatnonzero(inside)
            j = idx[int(np.argmin(np.abs(px[idx] - t)))]
            inside[j] = False
            self.available[j] = False
            chosen.append(j)
        chosen = np.array(chosen)
        return SampleBatch.from_arrays(px[chosen], self.population.y[chosen],
                                       self.population.w[chosen], domain=(lo, hi), stage=stage)


# --- plan -------------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    n_total: int
    p: float
    n1: int
    n2: int
    beta: float
    gamma1: float
    c1: float
    interval: tuple
    stage1_family: str
    psi: str
    flags: tuple = field(default=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval"] = list(self.interval)
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        d = dict(d)
        d["interval"] = tuple(d["interval"])
        d["flags"] = tuple(d.get("flags", ()))
        return cls(**d)


class IntervalPlan(NamedTuple):
    c1: float
    gamma1: float
    interval: tuple
    flags: tuple


def allocate(n: int, p: float):
    if not 0 < p < 1:
        raise InvalidPlan(f"p must lie in (0, 1), got {p}")
    n1 = int(math.floor(n * p))
    return n1, n - n1


def optimal_p(gamma1: float) -> float:
    """Stage-one share minimising the stage-two spread: ``gamma1 / (1 + gamma1)``."""
    if not gamma1 > 0:
        raise InvalidPlan("gamma1 must be positive")
    return gamma1 / (1.0 + gamma1)


def plan_stage_two(d1, n1, c_hat=None, g1_at_d1=None, quantile=None, family="wald",
                   domain=(0.0, 1.0), stage1_lr_interval=None, n2=None) -> IntervalPlan:
    """Stage-two sampling interval with gamma1 = 1/3 and the matching C1.

    ``wald``: ``[d1 +/- n1^(-1/3) c_hat g1^(-1/3) q] ∩ [a, b]``.
    ``lr``: the supplied stage-one LR region, with C1 back-solved from its
    half-width. Raises :class:`IntervalTooNarrow` if the interval is narrower
    than ``4 (b - a) / n2`` (or empty when ``n2`` is not given).
    """
    a, b = float(domain[0]), float(domain[1])
    gamma1 = 1.0 / 3.0
    flags = []
    if family == "wald":
        if c_hat is None or g1_at_d1 is None or quantile is None:
            raise MissingNuisance("wald stage-one interval needs c_hat, g1_at_d1 and quantile")
        c1 = c_hat * g1_at_d1 ** (-1.0 / 3.0) * quantile
        half = c1 * n1 ** (-gamma1)
        lo, hi = max(d1 - half, a), min(d1 + half, b)
        if lo > d1 - half or hi < d1 + half:
            flags.append("clipped-to-domain")
    elif family == "lr":
        if stage1_lr_interval is None:
            raise MissingNuisance("lr stage-one interval must be supplied")
        lo, hi = max(float(stage1_lr_interval[0]), a), min(float(stage1_lr_interval[1]), b)
        c1 = 0.5 * (hi - lo) * n1 ** gamma1
        flags.append("heuristic-stage1")
    else:
        raise InvalidPlan(f"unknown stage-one family {family!r}")
    min_width = 4.0 * (b - a) / n2 if n2 else 0.0
    if not hi - lo > min_width:
        raise IntervalTooNarrow(f"stage-two interval [{lo:.6g}, {hi:.6g}] narrower than {min_width:.3g}")
    return IntervalPlan(float(c1), gamma1, (float(lo), float(hi)), tuple(flags))


def are(c1, p, gamma1, psi0, g_at_d0, n) -> float:
    """Asymptotic sd ratio of the one-stage to the two-stage estimator."""
    if not (c1 > 0 and psi0 > 0 and g_at_d0 > 0 and n > 0 and gamma1 > 0 and 0 < p < 1):
        raise InvalidPlan("are() needs positive constants and p in (0, 1)")
    return ((1.0 - p) * p**gamma1 * psi0 / (c1 * g_at_d0)) ** (1.0 / 3.0) * n ** (gamma1 / 3.0)


@dataclass(frozen=True)
class MultistageRates:
    gammas: list
    rates: list
    lower_bound: object

    @property
    def final_rate(self):
        return self.rates[-1]


def multistage_rates(k: int, gamma1, eta=0) -> MultistageRates:
    """Interval exponents and convergence rates of a k-stage isotonic design.

    ``gamma_{i+1} = (1 + gamma_i) / 3 - eta`` for i = 1..k-2; the stage rates
    are ``(1 + gamma_i) / 3``. Also returns the closed-form lower bound
    ``(1 - eta) sum_{j=1}^{k-2} 3^-j + 3^-(k-1) + gamma1 / 3^(k-1)`` on the
    final rate. Fractions in, fractions out.
    """
    if k < 2:
        raise InvalidSlack("need at least two stages")
    exact = isinstance(gamma1, (Fraction, int)) and isinstance(eta, (Fraction, int))
    one = Fraction(1) if exact else 1.0
    third = one / 3
    if not 0 < gamma1 < one / 2:
        raise InvalidSlack(f"gamma1 must lie in (0, 1/2), got {gamma1}")
    if eta < 0:
        raise InvalidSlack("eta must be nonnegative")
    gammas = [gamma1 * one]
    for _ in range(k - 2):
        nxt = (one + gammas[-1]) * third - eta
        if not 0 < nxt < one / 2:
            raise InvalidSlack(f"gamma left (0, 1/2): {nxt}")
        gammas.append(nxt)
    rates = [(one + g) * third for g in gammas]
    bound = (one - eta) * sum(third**j for j in range(1, k - 1)) + third ** (k - 1) + gamma1 * third ** (k - 1)
    return MultistageRates(gammas, rates, bound)


# --- orchestration ----------------------------------------------------------


@dataclass(frozen=True)
class TwoStageConfig:
    n: int
    theta0: float
    domain: tuple = (0.0, 1.0)
    p: float = 0.25
    beta: float = 0.01
    alpha: float = 0.05
    stage1: str = "lr"
    stage2: str = "lr"
    psi: str = "uniform"
    design_density: float | None = None  # stage-one density at the estimate; None -> 1/(b-a)
    pool_threshold: int = POOL_THRESHOLD
    combine: bool | None = None
    grid_size: int = 2001
    known_sigma2: float | None = None
    known_deriv: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TwoStageConfig":
        d = dict(d)
        d["domain"] = tuple(d.get("domain", (0.0, 1.0)))
        return cls(**d)


@dataclass
class TwoStageResult:
    config: TwoStageConfig
    plan: StagePlan | None
    stage1: IntervalEstimate
    estimate: IntervalEstimate | None
    timings_ms: dict
    aborted: str | None = None
    samples: tuple = ()

    def to_dict(self, include_samples=False) -> dict:
        d = {
            "config": self.config.to_dict(),
            "plan": None if self.plan is None else self.plan.to_dict(),
            "stage1": self.stage1.to_dict(),
            "estimate": None if self.estimate is None else self.estimate.to_dict(),
            "timings_ms": self.timings_ms,
            "aborted": self.aborted,
        }
        if include_samples:
            d["samples"] = [s.to_dict() for s in self.samples]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TwoStageResult":
        return cls(
            config=TwoStageConfig.from_dict(d["config"]),
            plan=None if d["plan"] is None else StagePlan.from_dict(d["plan"]),
            stage1=IntervalEstimate.from_dict(d["stage1"]),
            estimate=None if d["estimate"] is None else IntervalEstimate.from_dict(d["estimate"]),
            timings_ms=dict(d["timings_ms"]),
            aborted=d.get("aborted"),
            samples=tuple(SampleBatch.from_dict(s) for s in d.get("samples", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


class _Clock:
    def __init__(self):
        self.t0 = self.last = time.perf_counter()
        self.laps = {}

    def lap(self, name):
        now = time.perf_counter()
        self.laps[name] = 1e3 * (now - self.last)
        self.last = now

    def done(self):
        self.laps["total"] = 1e3 * (time.perf_counter() - self.t0)
        return self.laps


def _nuisance(sample, at, density, known_sigma2, known_deriv, source):
    if known_sigma2 is not None and known_deriv is not None:
        g = density(at) if callable(density) else density
        return NuisanceEstimates(float(known_sigma2), float(at), float(known_deriv), float("nan"),
                                 source, float(g), ("known-nuisance",))
    est = estimate_nuisance(sample, at, design_density=density, source_stage=source)
    if known_sigma2 is not None or known_deriv is not None:
        est = NuisanceEstimates(
            float(known_sigma2) if known_sigma2 is not None else est.sigma2, est.deriv_at,
            float(known_deriv) if known_deriv is not None else est.deriv, est.bandwidth,
            source, est.density, est.flags + ("partly-known-nuisance",))
    return est


def _sigma2(sample, known):
    return float(known) if known is not None else estimate_sigma2(sample)


def run_one_stage(oracle, n, theta0, family="lr", domain=(0.0, 1.0), alpha=0.05,
                  design_density=None, grid_size=2001, known_sigma2=None, known_deriv=None,
                  quantiles: QuantileSource | None = None):
    """One-stage isotonic procedure: n points over the domain, Wald or LR interval."""
    Q = quantiles or default_quantiles()
    clock = _Clock()
    s = oracle.sample(domain, n, stage="one")
    clock.lap("sample")
    a, b = float(domain[0]), float(domain[1])
    g = design_density if design_density is not None else 1.0 / (b - a)
    if family == "wald":
        d = invert_threshold(pava(s), theta0)
        nu = _nuisance(s, d, g, known_sigma2, known_deriv, "one")
        c_hat = wald_constant(nu.sigma2, nu.deriv, deriv_floor(s))
        est = wald_ci_one_stage(d, s.n, c_hat, g, Q("Z", 1 - alpha / 2), (a, b), 1 - alpha, nu)
    elif family == "lr":
        s2 = _sigma2(s, known_sigma2)
        est = lr_ci(s, theta0, s2, Q("D", 1 - alpha), domain=(a, b), grid_size=grid_size,
                    level=1 - alpha)
    else:
        raise InvalidPlan(f"unknown family {family!r}")
    clock.lap("fit_ci")
    return est, clock.done(), s


def run_two_stage(oracle, config: TwoStageConfig, quantiles: QuantileSource | None = None,
                  keep_samples=False) -> TwoStageResult:
    """Run both stages and build the final interval.

    An :class:`IntervalTooNarrow` plan aborts the run; the result then carries
    the stage-one interval and ``aborted`` is set.
    """
    cfg = config
    Q = quantiles or default_quantiles()
    if cfg.n < 20:
        raise InvalidPlan("two-stage runs need a budget of at least 20")
    if cfg.stage1 not in ("wald", "lr") or cfg.stage2 not in ("wald", "lr"):
        raise InvalidPlan("stage families must be 'wald' or 'lr'")
    psi = get_psi(cfg.psi)
    a, b = float(cfg.domain[0]), float(cfg.domain[1])
    n1, n2 = allocate(cfg.n, cfg.p)
    g1 = cfg.design_density if cfg.design_density is not None else 1.0 / (b - a)
    clock = _Clock()

    s1 = oracle.sample((a, b), n1, stage="one")
    clock.lap("stage1_sample")
    if cfg.stage1 == "wald":
        d1 = invert_threshold(pava(s1), cfg.theta0)
        nu1 = _nuisance(s1, d1, g1, cfg.known_sigma2, cfg.known_deriv, "one")
        c_hat = wald_constant(nu1.sigma2, nu1.deriv, deriv_floor(s1))
        q1 = Q("Z", 1 - cfg.beta / 2)
        stage1 = wald_ci_one_stage(d1, n1, c_hat, g1, q1, (a, b), 1 - cfg.beta, nu1)
    else:
        sig1 = _sigma2(s1, cfg.known_sigma2)
        stage1 = lr_ci(s1, cfg.theta0, sig1, Q("D", 1 - cfg.beta), domain=(a, b),
                       grid_size=cfg.grid_size, level=1 - cfg.beta)
    try:
        ip = plan_stage_two(stage1.point, n1, family="lr", domain=(a, b), n2=n2,
                            stage1_lr_interval=(stage1.lower, stage1.upper)) \
            if cfg.stage1 == "lr" else \
            plan_stage_two(stage1.point, n1, c_hat, g1, q1, "wald", (a, b), n2=n2)
    except IntervalTooNarrow as exc:
        clock.lap("stage1_fit")
        return TwoStageResult(cfg, None, stage1, None, clock.done(), aborted=str(exc),
                              samples=(s1,) if keep_samples else ())
    plan = StagePlan(cfg.n, cfg.p, n1, n2, cfg.beta, ip.gamma1, ip.c1, ip.interval, cfg.stage1,
                     psi.name, ip.flags)
    clock.lap("stage1_fit")

    L1, U1 = plan.interval
    s2 = oracle.sample((L1, U1), n2, psi=psi, stage="two")
    clock.lap("stage2_sample")
    combine = cfg.combine if cfg.combine is not None else cfg.n < cfg.pool_threshold
    data = s1.combine(s2) if combine else s2
    half = 0.5 * (U1 - L1)
    mid = 0.5 * (U1 + L1)

    if cfg.stage2 == "wald":
        d2 = invert_threshold(pava(s2), cfg.theta0)

        def density(x):
            g2 = psi.density((x - mid) / half) / half
            return cfg.p * g1 + (1 - cfg.p) * g2 if combine else g2

        nu2 = _nuisance(data, d2, density, cfg.known_sigma2, cfg.known_deriv,
                        "pooled" if combine else "two")
        base_c = wald_constant(nu2.sigma2, nu2.deriv, deriv_floor(data))
        est = wald_ci_two_stage(d2, cfg.n, base_c, plan.c1, cfg.p, plan.gamma1, psi.at_zero,
                                Q("Z", 1 - cfg.alpha / 2), (a, b), 1 - cfg.alpha, nu2)
    else:
        sig2 = _sigma2(data, cfg.known_sigma2)
        est = lr_ci(data, cfg.theta0, sig2, Q("D", 1 - cfg.alpha), domain=(a, b),
                    grid_size=cfg.grid_size, level=1 - cfg.alpha)
    if cfg.stage1 == "lr":
        est = with_flags(est, ("heuristic-stage1",))
    if combine:
        est = with_flags(est, ("pooled-stages",))
    clock.lap("stage2_fit_ci")
    samples = (s1, s2) if keep_samples else ()
    return TwoStageResult(cfg, plan, stage1, est, clock.done(), samples=samples)


def with_flags(est: IntervalEstimate, extra) -> IntervalEstimate:
    d = est.to_dict()
    d["diagnostics"] = list(est.diagnostics) + [f for f in extra if f not in est.diagnostics]
    return IntervalEstimate.from_dict(d)
