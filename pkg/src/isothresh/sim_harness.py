"""Monte Carlo experiments: coverage and length, convergence rates, slope RMSE,
timing, and budgeted emulation on a finite population.

Each replicate draws from its own counter-based stream addressed by
``(seed, cell, replicate, procedure)``, and aggregates use compensated sums,
so reports do not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .ci import IntervalEstimate
from .errors import (
    BudgetExceedsPopulation,
    IntervalTooNarrow,
    IsoThreshError,
    NonIncreasingFit,
    TooFewPoints,
)
from .iso_core import SampleBatch, invert_threshold, pava
from .limit_dist import QuantileSource, default_quantiles, stream
from .nuisance import derivative_local_quadratic, deriv_floor, estimate_nuisance, wald_constant
from .twostage import (
    PopulationOracle,
    SimulationOracle,
    TwoStageConfig,
    allocate,
    plan_stage_two,
    run_one_stage,
    run_two_stage,
    with_flags,
)

PROCEDURES = ("POSIRP-Wald", "POSIRP-LR", "PTSIRP-Wald", "PTSIRP-LR", "PABLTSP-lite")
DEFAULT_P = {"PTSIRP-Wald": 0.25, "PTSIRP-LR": 0.25, "PABLTSP-lite": 0.7}
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    id: str
    m: Callable
    m_prime: Callable
    domain: tuple = (0.0, 1.0)

    def check(self, points=10_000, tol=1e-6) -> None:
        """Monotonicity and derivative consistency on a uniform grid."""
        a, b = self.domain
        x = np.linspace(a, b, points)
        if np.any(np.diff(self.m(x)) < 0):
            raise IsoThreshError(f"{self.id}: m is not nondecreasing")
        h = 1e-6 * (b - a)
        xi = x[1:-1]
        fd = (self.m(xi + h) - self.m(xi - h)) / (2 * h)
        if np.max(np.abs(fd - self.m_prime(xi))) > tol:
            raise IsoThreshError(f"{self.id}: m_prime disagrees with finite differences")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-4.0 * (np.asarray(x) - 0.5)))


FUNCTIONS = {
    "sigmoid": TestFunction(
        "sigmoid", _sigmoid, lambda x: 4.0 * _sigmoid(x) * (1.0 - _sigmoid(x))),
    "quadratic": TestFunction("quadratic", lambda x: np.asarray(x) ** 2, lambda x: 2.0 * np.asarray(x)),
    "isosine": TestFunction(
        "isosine",
        lambda x: np.sin(6 * np.pi * np.asarray(x)) / 40 + 0.25 + np.asarray(x) / 2 + np.asarray(x) ** 2 / 4,
        lambda x: 6 * np.pi * np.cos(6 * np.pi * np.asarray(x)) / 40 + 0.5 + np.asarray(x) / 2,
    ),
}


def custom_function(m, m_prime, domain=(0.0, 1.0), check=True) -> TestFunction:
    f = TestFunction("custom", m, m_prime, tuple(domain))
    if check:
        f.check()
    return f


def get_function(f) -> TestFunction:
    if isinstance(f, TestFunction):
        return f
    try:
        return FUNCTIONS[f]
    except KeyError:
        raise IsoThreshError(f"unknown test function {f!r}") from None


def draw_sample(f, n, sigma, seed=None, rng=None, design="uniform") -> SampleBatch:
    """``y = m(x) + N(0, sigma^2)`` with x i.i.d. uniform on the function's domain."""
    f = get_function(f)
    if n < 1 or sigma < 0:
        raise IsoThreshError("need n >= 1 and sigma >= 0")
    if design != "uniform":
        raise IsoThreshError(f"unsupported design {design!r}")
    rng = rng if rng is not None else stream(0 if seed is None else seed)
    a, b = f.domain
    x = rng.uniform(a, b, n)
    y = f.m(x) + sigma * rng.standard_normal(n) if sigma > 0 else f.m(x)
    return SampleBatch.from_arrays(x, y, domain=(a, b))


# --- procedures -------------------------------------------------------------


def pabltsp_lite(stage2: SampleBatch, theta0, alpha=0.05, domain=None) -> IntervalEstimate:
    """Local-linear comparator: OLS line on stage-two data, delta-method interval.

    A simplified stand-in for the bootstrap procedure it mimics; outputs carry
    the ``comparator-approximation`` label.
    """
    n = stage2.n
    if n < 3:
        raise TooFewPoints(f"comparator needs at least 3 points, got {n}")
    x, y = stage2.x, stage2.y
    X = np.column_stack([np.ones(n), x])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    b0, b1 = float(beta[0]), float(beta[1])
    if not b1 > 0:
        raise NonIncreasingFit(f"fitted slope {b1:.4g} is not positive")
    resid = y - X @ beta
    s2 = float(math.fsum(resid**2)) / (n - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    d = (theta0 - b0) / b1
    # gradient of (theta0 - b0) / b1 in (b0, b1)
    grad = np.array([-1.0 / b1, -d / b1])
    se = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    z = statistics.NormalDist().inv_cdf(1 - alpha / 2)
    a, b = domain if domain is not None else stage2.domain
    flags = ["comparator-approximation"]
    lo, hi = d - z * se, d + z * se
    if lo < a or hi > b:
        flags.append("clipped-to-domain")
    point = min(max(d, a), b)
    lo, hi = min(max(lo, a), b), max(min(hi, b), a)
    inputs = {"n": n, "intercept": b0, "slope": b1, "se": se, "z_quantile": z}
    return IntervalEstimate(point, lo, hi, "local_linear", 1 - alpha, (a, b), None,
                            tuple(flags), inputs)


def run_pabltsp_lite(oracle, n, theta0, p=0.7, domain=(0.0, 1.0), alpha=0.05, beta=0.01,
                     quantiles=None, known_sigma2=None, known_deriv=None):
    """Stage one as for the Wald two-stage design, then :func:`pabltsp_lite` on stage two.

    Known nuisance values only affect the stage-one interval.
    """
    Q = quantiles or default_quantiles()
    a, b = float(domain[0]), float(domain[1])
    t0 = time.perf_counter()
    n1, n2 = allocate(n, p)
    g1 = 1.0 / (b - a)
    s1 = oracle.sample((a, b), n1, stage="one")
    d1 = invert_threshold(pava(s1), theta0)
    if known_sigma2 is not None and known_deriv is not None:
        c_hat = wald_constant(known_sigma2, known_deriv)
    else:
        nu = estimate_nuisance(s1, d1, design_density=g1)
        c_hat = wald_constant(nu.sigma2, nu.deriv, deriv_floor(s1))
    ip = plan_stage_two(d1, n1, c_hat, g1, Q("Z", 1 - beta / 2), "wald", (a, b), n2=n2)
    s2 = oracle.sample(ip.interval, n2, stage="two")
    est = pabltsp_lite(s2, theta0, alpha, (a, b))
    return est, {"total": 1e3 * (time.perf_counter() - t0)}


def run_procedure(name, oracle, n, theta0, domain=(0.0, 1.0), p=None, alpha=0.05, beta=0.01,
                  grid_size=2001, known_sigma2=None, known_deriv=None, quantiles=None,
                  fallback=True):
    """Run one named procedure; returns ``(IntervalEstimate, timings_ms)``.

    A two-stage run aborted at planning reports its stage-one interval,
    flagged ``stage1-fallback``; with ``fallback=False`` the abort is raised
    as :class:`IntervalTooNarrow` instead.
    """
    if name not in PROCEDURES:
        raise IsoThreshError(f"unknown procedure {name!r}")
    p = DEFAULT_P.get(name) if p is None else p
    if name.startswith("POSIRP"):
        fam = "wald" if name.endswith("Wald") else "lr"
        est, times, _ = run_one_stage(oracle, n, theta0, fam, domain, alpha, grid_size=grid_size,
                                      known_sigma2=known_sigma2, known_deriv=known_deriv,
                                      quantiles=quantiles)
        return est, times
    if name == "PABLTSP-lite":
        return run_pabltsp_lite(oracle, n, theta0, p, domain, alpha, beta, quantiles,
                                known_sigma2, known_deriv)
    fam = "wald" if name.endswith("Wald") else "lr"
    cfg = TwoStageConfig(n=n, theta0=theta0, domain=tuple(domain), p=p, beta=beta, alpha=alpha,
                         stage1=fam, stage2=fam, grid_size=grid_size,
                         known_sigma2=known_sigma2, known_deriv=known_deriv)
    res = run_two_stage(oracle, cfg, quantiles)
    if res.aborted:
        if not fallback:
            raise IntervalTooNarrow(res.aborted)
        return with_flags(res.stage1, ("stage1-fallback",)), res.timings_ms
    return res.estimate, res.timings_ms


# --- aggregation ------------------------------------------------------------


def _mean(values):
    return math.fsum(values) / len(values) if values else float("nan")


def _sd(values):
    if len(values) < 2:
        return float("nan")
    mu = _mean(values)
    return math.sqrt(math.fsum((v - mu) ** 2 for v in values) / (len(values) - 1))


@dataclass
class CellResult:
    function: str
    d0: float
    sigma: float
    n: int
    procedure: str
    replicates: int
    failures: int
    fallbacks: int
    coverage: float
    coverage_se: float
    avg_length: float
    length_se: float
    bias: float
    rmse: float
    mean_ms: float
    failed: bool
    failure_reasons: dict = field(default_factory=dict)

    def coverage_band(self, k=2.0):
        return (self.coverage - k * self.coverage_se, self.coverage + k * self.coverage_se)


def _summarise(key, records, replicates):
    function, d0, sigma, n, proc = key
    ok = [r for r in records if r["error"] is None]
    reasons = {}
    for r in records:
        if r["error"] is not None:
            reasons[r["error"]] = reasons.get(r["error"], 0) + 1
    failures = len(records) - len(ok)
    cov = _mean([1.0 if r["covers"] else 0.0 for r in ok])
    lengths = [r["length"] for r in ok]
    errs = [r["point"] - d0 for r in ok]
    m = len(ok)
    return CellResult(
        function=function, d0=d0, sigma=sigma, n=n, procedure=proc, replicates=replicates,
        failures=failures, fallbacks=sum(1 for r in ok if r["fallback"]), coverage=cov,
        coverage_se=math.sqrt(cov * (1 - cov) / m) if m else float("nan"),
        avg_length=_mean(lengths),
        length_se=_sd(lengths) / math.sqrt(m) if m > 1 else float("nan"),
        bias=_mean(errs),
        rmse=math.sqrt(_mean([e * e for e in errs])) if m else float("nan"),
        mean_ms=_mean([r["ms"] for r in ok]),
        failed=failures > MAX_FAILURE_RATE * replicates,
        failure_reasons=reasons,
    )


@dataclass
class CoverageReport:
    config: dict
    cells: list

    def cell(self, function, d0, sigma, n, procedure) -> CellResult:
        for c in self.cells:
            if (c.function, c.n, c.procedure) == (function, n, procedure) and \
                    math.isclose(c.d0, d0) and math.isclose(c.sigma, sigma):
                return c
        raise KeyError((function, d0, sigma, n, procedure))

    @property
    def failed(self) -> bool:
        return any(c.failed for c in self.cells)

    def to_dict(self) -> dict:
        return {"config": self.config, "cells": [asdict(c) for c in self.cells],
                "failed": self.failed}

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageReport":
        return cls(dict(d["config"]), [CellResult(**c) for c in d["cells"]])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        return rows_to_csv([{k: v for k, v in asdict(c).items() if k != "failure_reasons"}
                            for c in self.cells])


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


@dataclass(frozen=True)
class ExperimentConfig:
    functions: tuple = ("quadratic",)
    d0s: tuple = (0.5,)
    sigmas: tuple = (0.1,)
    ns: tuple = (500,)
    procedures: tuple = ("POSIRP-LR", "PTSIRP-LR")
    replicates: int = 1000
    seed: int = 2024
    threads: int = 1
    p: float | None = None
    alpha: float = 0.05
    beta: float = 0.01
    grid_size: int = 2001
    known_nuisance: bool = False

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise IsoThreshError(f"unknown experiment keys: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _as_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    return ExperimentConfig.from_dict(dict(config))


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _cells(cfg):
    out = []
    for f in cfg.functions:
        for d0 in cfg.d0s:
            for sigma in cfg.sigmas:
                for n in cfg.ns:
                    out.append((f, float(d0), float(sigma), int(n)))
    return out


def coverage_experiment(config, quantiles: QuantileSource | None = None) -> CoverageReport:
    """Coverage, length, error and wall-time of each procedure on independent replicates.

    ``theta0`` is ``m(d0)`` of the test function. Failed replicates are
    counted per reason and excluded from the averages; a procedure failing on
    more than 5% of its replicates marks the cell (and the report) failed.
    """
    cfg = _as_config(config)
    Q = quantiles or default_quantiles()
    for proc in cfg.procedures:
        if proc not in PROCEDURES:
            raise IsoThreshError(f"unknown procedure {proc!r}")
    cells = []
    for ci, (fname, d0, sigma, n) in enumerate(_cells(cfg)):
        f = get_function(fname)
        theta0 = float(f.m(d0))
        known = {}
        if cfg.known_nuisance:
            known = {"known_sigma2": sigma**2, "known_deriv": float(f.m_prime(d0))}
        for pi, proc in enumerate(cfg.procedures):
            def one(rep, ci=ci, pi=pi, f=f, proc=proc, theta0=theta0, sigma=sigma, n=n, d0=d0):
                oracle = SimulationOracle(f.m, sigma, stream(cfg.seed, ci, rep, pi), f.domain)
                try:
                    est, times = run_procedure(proc, oracle, n, theta0, f.domain, cfg.p, cfg.alpha,
                                               cfg.beta, cfg.grid_size, quantiles=Q, **known)
                except IsoThreshError as exc:
                    return {"error": type(exc).__name__}
                return {"error": None, "covers": est.covers(d0), "length": est.length,
                        "point": est.point, "ms": times["total"],
                        "fallback": "stage1-fallback" in est.diagnostics}

            records = _map(one, range(cfg.replicates), cfg.threads)
            cells.append(_summarise((fname, d0, sigma, n, proc), records, cfg.replicates))
    return CoverageReport(cfg.to_dict(), cells)


# --- rates ------------------------------------------------------------------

RATE_PROCEDURES = ("one-stage", "two-stage")


def _point_one_stage(oracle, n, theta0, domain):
    return invert_threshold(pava(oracle.sample(domain, n)), theta0)


def _point_two_stage(oracle, n, theta0, domain, p, beta, Q):
    """Stage-two isotonic estimate with a Wald stage-one interval (gamma1 = 1/3)."""
    a, b = domain
    n1, n2 = allocate(n, p)
    g1 = 1.0 / (b - a)
    s1 = oracle.sample(domain, n1)
    d1 = invert_threshold(pava(s1), theta0)
    nu = estimate_nuisance(s1, d1, design_density=g1)
    c_hat = wald_constant(nu.sigma2, nu.deriv, deriv_floor(s1))
    ip = plan_stage_two(d1, n1, c_hat, g1, Q("Z", 1 - beta / 2), "wald", domain, n2=n2)
    s2 = oracle.sample(ip.interval, n2, stage="two")
    return invert_threshold(pava(s2), theta0)


@dataclass
class RateReport:
    config: dict
    rmse: dict  # procedure -> list aligned with ns
    slopes: dict  # procedure -> (slope, se)
    failures: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "rmse": self.rmse,
                "slopes": {k: list(v) for k, v in self.slopes.items()}, "failures": self.failures}

    @classmethod
    def from_dict(cls, d: dict) -> "RateReport":
        return cls(dict(d["config"]), dict(d["rmse"]),
                   {k: tuple(v) for k, v in d["slopes"].items()}, dict(d["failures"]))

    def to_csv(self) -> str:
        ns = self.config["ns"]
        rows = [{"procedure": proc, "n": n, "rmse": r} for proc, vals in self.rmse.items()
                for n, r in zip(ns, vals)]
        return rows_to_csv(rows)


def log_slope(ns, values):
    """OLS slope of log(values) on log(ns) and its standard error."""
    lx, ly = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    X = np.column_stack([np.ones_like(lx), lx])
    beta, *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - X @ beta
    k = lx.size
    s2 = float(resid @ resid) / (k - 2) if k > 2 else 0.0
    se = math.sqrt(s2 / float(np.sum((lx - lx.mean()) ** 2)))
    return float(beta[1]), se


def rate_experiment(function="quadratic", d0=0.5, sigma=0.1, ns=(200, 400, 800, 1600, 3200),
                    procedures=RATE_PROCEDURES, replicates=500, seed=2025, threads=1, p=0.25,
                    beta=0.01, quantiles=None) -> RateReport:
    """RMSE of the isotonic point estimates across budgets and the log-log slope."""
    ns = [int(n) for n in ns]
    if max(ns) < 8 * min(ns):
        raise IsoThreshError("n grid must span at least a factor of 8")
    f = get_function(function)
    theta0 = float(f.m(d0))
    Q = quantiles or default_quantiles()
    rmse, slopes, failures = {}, {}, {}
    for pi, proc in enumerate(procedures):
        if proc not in RATE_PROCEDURES:
            raise IsoThreshError(f"unknown rate procedure {proc!r}")
        vals, fails = [], []
        for ni, n in enumerate(ns):
            def one(rep, ni=ni, n=n, pi=pi, proc=proc):
                oracle = SimulationOracle(f.m, sigma, stream(seed, ni, rep, pi), f.domain)
                try:
                    if proc == "one-stage":
                        return _point_one_stage(oracle, n, theta0, f.domain) - d0
                    return _point_two_stage(oracle, n, theta0, f.domain, p, beta, Q) - d0
                except IsoThreshError:
                    return None

            errs = _map(one, range(replicates), threads)
            ok = [e for e in errs if e is not None]
            fails.append(len(errs) - len(ok))
            vals.append(math.sqrt(_mean([e * e for e in ok])))
        rmse[proc] = vals
        slopes[proc] = log_slope(ns, vals)
        failures[proc] = fails
    config = {"function": f.id, "d0": d0, "sigma": sigma, "ns": ns, "procedures": list(procedures),
              "replicates": replicates, "seed": seed, "p": p, "beta": beta}
    return RateReport(config, rmse, slopes, failures)


# --- slope estimation study --------------------------------------------------


def derivative_rmse_experiment(functions=("quadratic", "isosine"), d0=0.5, sigmas=(0.1,),
                               ns=(500,), replicates=200, seed=2026, threads=1) -> list:
    """RMSE of the local quadratic slope at d0 per (function, sigma, n)."""
    rows = []
    for fi, fname in enumerate(functions):
        f = get_function(fname)
        truth = float(f.m_prime(d0))
        for si, sigma in enumerate(sigmas):
            for ni, n in enumerate(ns):
                def one(rep, fi=fi, si=si, ni=ni, f=f, sigma=sigma, n=n):
                    s = draw_sample(f, n, sigma, rng=stream(seed, fi, si, ni, rep))
                    try:
                        return derivative_local_quadratic(s, d0, design_density=1.0) - truth
                    except IsoThreshError:
                        return None

                errs = _map(one, range(replicates), threads)
                ok = [e for e in errs if e is not None]
                rows.append({"function": f.id, "sigma": sigma, "n": n, "d0": d0, "truth": truth,
                             "rmse": math.sqrt(_mean([e * e for e in ok])),
                             "bias": _mean(ok), "failures": len(errs) - len(ok)})
    return rows


# --- finite-population emulation --------------------------------------------


def synthetic_population(seed=1477, size=1477, sigma=0.1, resolution=0.01, jitter=None,
                         function="isosine") -> SampleBatch:
    """Stand-in population: covariates on a coarse grid (so ties occur), then jittered.

    Responses follow the test function plus N(0, sigma^2). The jitter keeps
    the order of distinct covariates.
    """
    f = get_function(function)
    rng = stream(seed, 0xE)
    a, b = f.domain
    x = np.round(rng.uniform(a, b, size) / resolution) * resolution
    x = np.clip(x, a, b)
    y = f.m(x) + sigma * rng.standard_normal(size)
    eps = 0.5 * resolution if jitter is None else jitter
    return SampleBatch.from_arrays(x, y, domain=(a - eps, b + eps), ties="jitter",
                                   jitter_eps=eps, rng=rng)


@dataclass
class EmulationReport:
    theta0: float
    truth: float
    budget: int
    p: float
    rows: list

    def row(self, procedure) -> dict:
        for r in self.rows:
            if r["estimator"] == procedure:
                return r
        raise KeyError(procedure)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmulationReport":
        return cls(**d)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def emulate_population(population: SampleBatch, theta0, budget, p=0.5,
                       procedures=("POSIRP-Wald", "POSIRP-LR", "PTSIRP-Wald", "PTSIRP-LR"),
                       seed=0, targets="equispaced", grid_size=2001,
                       quantiles=None) -> EmulationReport:
    """Per-estimator comparison against the full-population isotonic threshold.

    Each procedure gets a fresh budgeted oracle over the same population.
    """
    if budget > population.n:
        raise BudgetExceedsPopulation(f"budget {budget} exceeds population size {population.n}")
    truth = invert_threshold(pava(population), theta0)
    domain = population.domain
    rows = []
    for pi, proc in enumerate(procedures):
        rng = stream(seed, pi) if targets == "random" else None
        oracle = PopulationOracle(population, targets=targets, rng=rng)
        pp = p if proc in ("PTSIRP-Wald", "PTSIRP-LR", "PABLTSP-lite") else None
        if proc.startswith("POSIRP"):
            alloc = str(budget)
        else:
            n1, n2 = allocate(budget, pp)
            alloc = f"{n1}/{n2}"
        row = {"estimator": proc, "n": alloc}
        try:
            est, times = run_procedure(proc, oracle, budget, theta0, domain, pp,
                                       grid_size=grid_size, quantiles=quantiles)
            row.update(point=est.point, bias=est.point - truth, lower=est.lower, upper=est.upper,
                       coverage=int(est.covers(truth)), length=est.length,
                       ms=times["total"], flags=";".join(est.diagnostics), error="")
        except IsoThreshError as exc:
            row.update(point=None, bias=None, lower=None, upper=None, coverage=None,
                       length=None, ms=None, flags="", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return EmulationReport(float(theta0), float(truth), int(budget), float(p), rows)


def emulation_coverage(budgets=(20, 40, 60, 80, 100), seeds=500, procedure="PTSIRP-LR", p=0.5,
                       theta0=None, function="isosine", d0=0.5, base_seed=7000, threads=1,
                       grid_size=2001, quantiles=None) -> list:
    """Coverage of the population truth over seeds; each seed draws a fresh population."""
    f = get_function(function)
    theta0 = float(f.m(d0)) if theta0 is None else theta0
    rows = []
    for budget in budgets:
        def one(s, budget=budget):
            pop = synthetic_population(seed=base_seed + s, function=function)
            rep = emulate_population(pop, theta0, budget, p, (procedure,), seed=s,
                                     grid_size=grid_size, quantiles=quantiles)
            return rep.rows[0]

        results = _map(one, range(seeds), threads)
        ok = [r for r in results if not r["error"]]
        cov = _mean([r["coverage"] for r in ok])
        rows.append({"procedure": procedure, "budget": budget, "seeds": seeds,
                     "failures": len(results) - len(ok),
                     "fallbacks": sum(1 for r in ok if "stage1-fallback" in r["flags"]),
                     "coverage": cov,
                     "coverage_se": math.sqrt(cov * (1 - cov) / len(ok)) if ok else float("nan"),
                     "avg_length": _mean([r["length"] for r in ok])})
    return rows
