"""Acceptance criteria 1-12 at their stated tolerances.

Each test prints one PASS/FAIL line (also collected in the terminal
summary). The Monte Carlo criteria run at full replicate counts, so the
module takes several minutes.
"""

import itertools
import math
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from isothresh import SampleBatch, argmin_diagnostic, pava
from isothresh.ci import lr_block_form, lr_stat
from isothresh.limit_dist import embedded_table, simulate_chernoff, tabulate_d
from isothresh.sim_harness import (
    ExperimentConfig,
    coverage_experiment,
    emulate_population,
    emulation_coverage,
    rate_experiment,
    synthetic_population,
)
from isothresh.twostage import multistage_rates

from oracles import brute_isotonic

pytestmark = pytest.mark.acceptance

GRID5 = np.array([0.0, 0.25, 0.5, 0.75, 1.0])


# --- 1 ----------------------------------------------------------------------


def _criterion1_samples(rng):
    # every y-vector for n <= 4, then seeded draws up to 3000 samples
    out = []
    for n in range(1, 5):
        out += [np.array(y) for y in itertools.product(GRID5, repeat=n)]
    per_n = (3000 - len(out)) // 4
    for n in range(5, 9):
        out += [rng.choice(GRID5, n) for _ in range(per_n)]
    while len(out) < 3000:
        out.append(rng.choice(GRID5, 8))
    return out


def test_criterion_01_pava_oracle(record_criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    samples = _criterion1_samples(rng)
    for y in samples:
        w = rng.choice([0.5, 1.0, 2.0, 3.0], y.size)
        fit = pava(SampleBatch.from_arrays(np.arange(1, y.size + 1) / (y.size + 1), y, w))
        expected, _ = brute_isotonic(list(y), list(w))
        worst = max(worst, float(np.max(np.abs(np.asarray(fit.levels) - expected))))
    elapsed = time.perf_counter() - t0
    ok = len(samples) == 3000 and worst <= 1e-10 and elapsed < 10
    assert record_criterion(1, ok, f"{len(samples)} samples, max dev {worst:.2e}, {elapsed:.1f}s")


# --- 2 ----------------------------------------------------------------------


def test_criterion_02_switching_relation(record_criterion):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        x = np.sort(rng.uniform(0.01, 0.99, n))
        s = SampleBatch.from_arrays(x, rng.normal(size=n), rng.uniform(0.5, 2.0, n), domain=(0, 1))
        lev = np.asarray(pava(s).levels)
        uniq = np.unique(lev)
        # two levels equal to fitted values, one between, two outside the range
        levels = [float(rng.choice(uniq)), float(rng.choice(uniq)),
                  float(np.mean(uniq[:2])) if uniq.size > 1 else uniq[0] + 0.5,
                  uniq[0] - 1.0, uniq[-1] + 1.0]
        for sv in levels:
            left = argmin_diagnostic(s, sv, tie="left")
            right = argmin_diagnostic(s, sv, tie="right")
            bad += not np.array_equal(lev < sv, left >= s.x)
            bad += not np.array_equal(lev <= sv, right >= s.x)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 30
    assert record_criterion(2, ok, f"1000 samples x 5 levels, {bad} violations, {elapsed:.1f}s")


# --- 3 ----------------------------------------------------------------------


def test_criterion_03_lr_block_identity(record_criterion):
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    worst = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(1000):
            n = int(rng.integers(2, 201))
            x = np.sort(rng.uniform(0, 1, n))
            s = SampleBatch.from_arrays(x, x + rng.normal(0, 0.3, n), rng.uniform(0.5, 2, n),
                                        domain=(0, 1))
            d0 = float(rng.uniform(0.05, 0.95))
            theta0 = float(rng.uniform(0.2, 0.8))
            a = lr_stat(s, theta0, d0, 0.09)
            b = lr_block_form(s, theta0, d0, 0.09)
            worst = max(worst, abs(a - b) / max(abs(a), 1e-300) if a > 1e-12 else abs(a - b))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 30
    assert record_criterion(3, ok, f"1000 instances, max rel dev {worst:.2e}, {elapsed:.1f}s")


# --- 4-6, 12: coverage, length and timing ---------------------------------------


def _band(c):
    return 0.92 <= c.coverage <= 0.98


def _cells_line(cells):
    return ", ".join(f"{c.function}/{c.d0}/{c.sigma}/{c.procedure}={c.coverage:.3f}" for c in cells)


def test_criterion_04_coverage_smooth_functions(record_criterion):
    rep = coverage_experiment(ExperimentConfig(
        functions=("quadratic", "sigmoid"), d0s=(0.4, 0.5, 0.6), sigmas=(0.1, 0.3), ns=(500,),
        procedures=("POSIRP-LR", "PTSIRP-LR"), replicates=1000, seed=4004))
    out = [c for c in rep.cells if not _band(c) or c.failed]
    lo = min(c.coverage for c in rep.cells)
    hi = max(c.coverage for c in rep.cells)
    detail = f"{len(rep.cells)} cells, coverage range [{lo:.3f}, {hi:.3f}]"
    if out:
        detail += "; outside band: " + _cells_line(out)
    assert record_criterion(4, not out, detail)


@pytest.fixture(scope="module")
def isosine_report():
    return coverage_experiment(ExperimentConfig(
        functions=("isosine",), d0s=(0.4, 0.5, 0.6), sigmas=(0.1, 0.3), ns=(500,),
        procedures=("POSIRP-LR", "PTSIRP-LR"), replicates=1000, seed=5005))


@pytest.fixture(scope="module")
def pabltsp_cell():
    rep = coverage_experiment(ExperimentConfig(
        functions=("isosine",), d0s=(0.5,), sigmas=(0.1,), ns=(500,),
        procedures=("PABLTSP-lite",), replicates=1000, seed=5006))
    return rep.cells[0]


def test_criterion_05_isosine_robustness(record_criterion, isosine_report, pabltsp_cell):
    out = [c for c in isosine_report.cells if not _band(c) or c.failed]
    lr_ok = not out
    comp_ok = pabltsp_cell.coverage < 0.90
    lo = min(c.coverage for c in isosine_report.cells)
    hi = max(c.coverage for c in isosine_report.cells)
    detail = (f"LR cells coverage range [{lo:.3f}, {hi:.3f}]"
              + ("" if lr_ok else " outside band: " + _cells_line(out))
              + f"; PABLTSP-lite coverage {pabltsp_cell.coverage:.3f} "
              + f"(failures {pabltsp_cell.failures}), needs < 0.90")
    assert record_criterion(5, lr_ok and comp_ok, detail)


def test_criterion_06_length_ordering(record_criterion, isosine_report):
    two = isosine_report.cell("isosine", 0.5, 0.1, 500, "PTSIRP-LR")
    one = isosine_report.cell("isosine", 0.5, 0.1, 500, "POSIRP-LR")
    # error bars are +/- 2 standard errors of the mean length
    ok = two.avg_length + 2 * two.length_se < one.avg_length - 2 * one.length_se
    detail = (f"PTSIRP-LR {two.avg_length:.4f}+/-{2 * two.length_se:.4f} vs "
              f"POSIRP-LR {one.avg_length:.4f}+/-{2 * one.length_se:.4f}")
    assert record_criterion(6, ok, detail)


def test_criterion_12_timing_ordering(record_criterion, isosine_report):
    two = isosine_report.cell("isosine", 0.5, 0.1, 500, "PTSIRP-LR")
    one = isosine_report.cell("isosine", 0.5, 0.1, 500, "POSIRP-LR")
    ok = two.mean_ms < one.mean_ms
    assert record_criterion(12, ok, f"n=500: PTSIRP-LR {two.mean_ms:.2f} ms vs "
                                    f"POSIRP-LR {one.mean_ms:.2f} ms per replicate")


# --- 7 ----------------------------------------------------------------------


def test_criterion_07_rate_slopes(record_criterion):
    rep = rate_experiment("quadratic", 0.5, 0.1, ns=(200, 400, 800, 1600, 3200), replicates=500,
                          seed=7007)
    s1, se1 = rep.slopes["one-stage"]
    s2, se2 = rep.slopes["two-stage"]
    ok = abs(s1 + 1 / 3) <= 0.08 and abs(s2 + 4 / 9) <= 0.08
    fails = sum(rep.failures["two-stage"])
    assert record_criterion(7, ok, f"one-stage {s1:.3f} (se {se1:.3f}), two-stage {s2:.3f} "
                                   f"(se {se2:.3f}), two-stage failures {fails}")


# --- 8 ----------------------------------------------------------------------


def test_criterion_08_known_nuisance(record_criterion):
    rep = coverage_experiment(ExperimentConfig(
        functions=("isosine",), d0s=(0.5,), sigmas=(0.1,), ns=(500,),
        procedures=("PTSIRP-Wald",), replicates=1000, seed=8008, known_nuisance=True))
    c = rep.cells[0]
    ok = _band(c) and not c.failed
    assert record_criterion(8, ok, f"PTSIRP-Wald known nuisance coverage {c.coverage:.3f} "
                                   f"(se {c.coverage_se:.3f}), needs [0.92, 0.98]")


# --- 9 ----------------------------------------------------------------------


def test_criterion_09_limit_tables(record_criterion):
    z, d = embedded_table("Z"), embedded_table("D")
    locs, _ = simulate_chernoff(paths=z.meta["paths"], half_width=z.meta["half_width"],
                                step=z.meta["step"], seed=z.meta["seed"] + 1)
    x = np.sort(locs)
    N = x.size
    p = z.probs
    # distribution-free standard error from the order statistics k +/- sqrt(N p (1 - p))
    k, h = N * p, np.sqrt(N * p * (1 - p))
    se = 0.5 * (x[np.minimum((k + h).astype(int), N - 1)] - x[np.maximum((k - h).astype(int), 0)])
    half = len(p) // 2
    ratios = [abs(z.values[i] + z.values[-1 - i]) / math.hypot(se[i], se[-1 - i]) for i in range(half)]
    sym_ok = max(ratios) <= 3.0

    qz, qd = z.quantile(0.995), d.quantile(0.99)
    dom_ok = qz <= 2 and qd <= 4

    z2 = np.quantile(locs, p)
    d2 = tabulate_d(outer=d.meta["outer"], inner_n=d.meta["inner_n"], seed=d.meta["seed"] + 1)
    mid = (p >= 0.01) & (p <= 0.99)
    drift_z = float(np.max(np.abs(z2 - z.values)[mid]))
    drift_d = float(np.max(np.abs(d2.values - d.values)[mid]))
    drift_ok = max(drift_z, drift_d) <= 0.05
    ok = sym_ok and dom_ok and drift_ok
    detail = (f"symmetry max {max(ratios):.2f} se; q_Z(.995)={qz:.3f}, q_D(.99)={qd:.3f}; "
              f"drift on p in [.01,.99]: Z {drift_z:.3f}, D {drift_d:.3f}")
    assert record_criterion(9, ok, detail)


# --- 10 ---------------------------------------------------------------------


def test_criterion_10_multistage_rates(record_criterion):
    r = multistage_rates(4, Fraction(1, 3), 0)
    seq = r.gammas + [r.final_rate]
    exact = seq == [Fraction(1, 3), Fraction(4, 9), Fraction(13, 27), Fraction(40, 81)]
    below = all(x < Fraction(1, 2) for x in r.rates)
    bound_ok = True
    for eta in (Fraction(0), Fraction(1, 100)):
        for k in range(2, 12):
            rk = multistage_rates(k, Fraction(1, 3), eta)
            bound_ok &= rk.lower_bound <= rk.final_rate and rk.final_rate < Fraction(1, 2)
    ok = exact and below and bound_ok
    assert record_criterion(10, ok, "sequence " + ", ".join(map(str, seq))
                            + f"; rates < 1/2: {below}; bound <= recursion: {bound_ok}")


# --- 11 ---------------------------------------------------------------------


def test_criterion_11_emulation(record_criterion):
    pop = synthetic_population()
    rep = emulate_population(pop, 0.5625, 80, p=0.5)
    shape_ok = (rep.row("PTSIRP-LR")["n"] == "40/40" and rep.row("PTSIRP-Wald")["n"] == "40/40"
                and all({"bias", "lower", "upper", "coverage", "length", "n"} <= set(r)
                        for r in rep.rows))
    rows = emulation_coverage(budgets=(20, 40, 60, 80, 100), seeds=500, procedure="PTSIRP-LR", p=0.5)
    cov_ok = all(r["coverage"] >= 0.90 for r in rows)
    ok = shape_ok and cov_ok
    detail = ("40/40 report ok; " if shape_ok else "report shape wrong; ") + ", ".join(
        f"n={r['budget']}: {r['coverage']:.3f} (fallbacks {r['fallbacks']}, failures {r['failures']})"
        for r in rows)
    assert record_criterion(11, ok, detail)
