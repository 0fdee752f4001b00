import json
import math

import numpy as np
import pytest

from isothresh import SampleBatch, invert_threshold, pava
from isothresh.errors import BudgetExceedsPopulation, IsoThreshError, NonIncreasingFit
from isothresh.sim_harness import (
    FUNCTIONS,
    CoverageReport,
    EmulationReport,
    ExperimentConfig,
    RateReport,
    coverage_experiment,
    custom_function,
    derivative_rmse_experiment,
    draw_sample,
    emulate_population,
    log_slope,
    pabltsp_lite,
    rate_experiment,
    run_procedure,
    synthetic_population,
)
from isothresh.twostage import SimulationOracle


def test_builtin_functions_pass_checks():
    for f in FUNCTIONS.values():
        f.check()
    assert FUNCTIONS["sigmoid"].m(0.5) == pytest.approx(0.5)
    assert FUNCTIONS["isosine"].m(0.5) == pytest.approx(0.5625)


def test_custom_function_checks():
    custom_function(lambda x: x**3, lambda x: 3 * x**2)
    with pytest.raises(IsoThreshError):
        custom_function(lambda x: -x, lambda x: -1 + 0 * x)
    with pytest.raises(IsoThreshError):
        custom_function(lambda x: x**2, lambda x: x)


def test_draw_sample_noiseless_and_quartiles():
    f = FUNCTIONS["sigmoid"]
    s = draw_sample(f, 100, 0.0, seed=1)
    assert np.array_equal(s.y, f.m(s.x))
    big = draw_sample("quadratic", 100_000, 0.1, seed=2)
    q = np.quantile(big.x, [0.25, 0.5, 0.75])
    assert np.max(np.abs(q - [0.25, 0.5, 0.75])) < 0.01


def test_draw_sample_deterministic():
    assert draw_sample("isosine", 50, 0.1, seed=3) == draw_sample("isosine", 50, 0.1, seed=3)
    assert draw_sample("isosine", 50, 0.1, seed=3) != draw_sample("isosine", 50, 0.1, seed=4)
    with pytest.raises(IsoThreshError):
        draw_sample("quadratic", 0, 0.1)


# --- comparator -------------------------------------------------------------


def test_pabltsp_lite_exact_on_lines():
    x = np.linspace(0.3, 0.7, 40)
    s = SampleBatch.from_arrays(x, 2 * x - 0.2, domain=(0.3, 0.7))
    est = pabltsp_lite(s, 0.8, domain=(0, 1))
    assert est.point == pytest.approx(0.5, abs=1e-12)
    assert est.length == pytest.approx(0.0, abs=1e-6)
    assert "comparator-approximation" in est.diagnostics
    assert est.family == "local_linear"


def test_pabltsp_lite_rejects_falling_fit():
    x = np.linspace(0, 1, 10)
    with pytest.raises(NonIncreasingFit):
        pabltsp_lite(SampleBatch.from_arrays(x, -x), 0.5)


def test_pabltsp_lite_matches_textbook_delta_method():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.4, 0.6, 200)
    y = 1 + 3 * x + 0.2 * rng.normal(size=200)
    est = pabltsp_lite(SampleBatch.from_arrays(x, y, domain=(0.4, 0.6)), 2.5, domain=(0, 1))
    # closed-form slope/intercept and variance of the ratio
    xb, yb = x.mean(), y.mean()
    sxx = np.sum((x - xb) ** 2)
    b1 = np.sum((x - xb) * (y - yb)) / sxx
    b0 = yb - b1 * xb
    s2 = np.sum((y - b0 - b1 * x) ** 2) / 198
    d = (2.5 - b0) / b1
    var = s2 / b1**2 * (1 / 200 + (d - xb) ** 2 / sxx)
    assert est.point == pytest.approx(d, rel=1e-10)
    assert est.upper - est.point == pytest.approx(1.959964 * math.sqrt(var), rel=1e-5)


# --- procedures and reports -----------------------------------------------------


def test_run_procedure_names():
    f = FUNCTIONS["quadratic"]
    for name in ("POSIRP-Wald", "POSIRP-LR", "PTSIRP-Wald", "PTSIRP-LR", "PABLTSP-lite"):
        oracle = SimulationOracle(f.m, 0.1, np.random.default_rng(1))
        est, times = run_procedure(name, oracle, 300, 0.25)
        assert est.lower <= est.point <= est.upper and times["total"] > 0
    with pytest.raises(IsoThreshError):
        run_procedure("BOGUS", oracle, 300, 0.25)


def test_coverage_experiment_thread_invariant_and_round_trip():
    cfg = ExperimentConfig(functions=("quadratic",), ns=(200,), procedures=("POSIRP-Wald", "PTSIRP-LR"),
                           replicates=40, seed=11)
    a = coverage_experiment(cfg)
    b = coverage_experiment(ExperimentConfig(**{**cfg.__dict__, "threads": 3}))

    def strip(rep):
        return [{k: v for k, v in c.__dict__.items() if k != "mean_ms"} for c in rep.cells]

    assert strip(a) == strip(b)
    back = CoverageReport.from_dict(json.loads(a.dumps()))
    assert strip(back) == strip(a)
    c = a.cell("quadratic", 0.5, 0.1, 200, "PTSIRP-LR")
    assert 0 <= c.coverage <= 1 and c.avg_length >= 0
    assert c.coverage_se == pytest.approx(math.sqrt(c.coverage * (1 - c.coverage) / (40 - c.failures)))
    lines = a.to_csv().splitlines()
    assert len(lines) == 3 and lines[0].startswith("function,d0,sigma,n,procedure")


def test_experiment_config_rejects_unknown_keys():
    with pytest.raises(IsoThreshError):
        ExperimentConfig.from_dict({"replicats": 10})
    cfg = ExperimentConfig.from_dict({"functions": ["sigmoid"], "replicates": 100})
    assert cfg.functions == ("sigmoid",)
    with pytest.raises(IsoThreshError):
        coverage_experiment({"procedures": ["magic"], "replicates": 1})


def test_failures_are_counted_not_dropped():
    # a flat function makes every Wald interval fail
    flat = custom_function(lambda x: 0 * np.asarray(x) + 0.5, lambda x: 0 * np.asarray(x))
    import isothresh.sim_harness as sh

    sh.FUNCTIONS["flat-test"] = flat
    try:
        rep = coverage_experiment(ExperimentConfig(functions=("flat-test",), ns=(100,),
                                                   procedures=("PABLTSP-lite",), replicates=20,
                                                   sigmas=(0.0,)))
    finally:
        del sh.FUNCTIONS["flat-test"]
    c = rep.cells[0]
    assert c.failures == 20 and c.failed and rep.failed
    assert sum(c.failure_reasons.values()) == 20


def test_coverage_error_bars_bracket_reruns():
    # spot checks across cells: independent reruns should differ by less
    # than two combined standard errors most of the time
    cells, hits = 0, 0
    for seed_pair in range(10):
        reps = [
            coverage_experiment(ExperimentConfig(
                functions=("quadratic", "sigmoid"), d0s=(0.4, 0.6), ns=(200,),
                procedures=("POSIRP-Wald",), replicates=200, known_nuisance=True,
                seed=1000 + 2 * seed_pair + k))
            for k in (0, 1)
        ]
        for c1, c2 in zip(reps[0].cells, reps[1].cells):
            cells += 1
            hits += abs(c1.coverage - c2.coverage) <= 2 * math.hypot(c1.coverage_se, c2.coverage_se)
    assert hits / cells >= 0.85


# --- rates --------------------------------------------------------------------


def test_log_slope_exact_power_law():
    ns = [100, 200, 400, 800]
    slope, se = log_slope(ns, [3 * n ** (-0.4) for n in ns])
    assert slope == pytest.approx(-0.4) and se == pytest.approx(0.0, abs=1e-12)


def test_rate_experiment_small_and_round_trip():
    rep = rate_experiment(ns=(100, 200, 400, 800), replicates=30, seed=3)
    assert set(rep.rmse) == {"one-stage", "two-stage"}
    assert RateReport.from_dict(json.loads(json.dumps(rep.to_dict()))).to_dict() == rep.to_dict()
    assert len(rep.to_csv().splitlines()) == 1 + 8
    with pytest.raises(IsoThreshError):
        rate_experiment(ns=(100, 200, 400))


def test_noiseless_rmse_bounded_by_spacing():
    f = FUNCTIONS["quadratic"]
    for n in (200, 800):
        oracle = SimulationOracle(f.m, 0.0, np.random.default_rng(n))
        s = oracle.sample((0, 1), n)
        d = invert_threshold(pava(s), 0.25)
        assert abs(d - 0.5) <= np.max(np.diff(s.x))


# --- slope study --------------------------------------------------------------


def test_derivative_rmse_isosine_harder_than_quadratic():
    rows = derivative_rmse_experiment(ns=(500,), replicates=100)
    by = {r["function"]: r for r in rows}
    assert by["isosine"]["rmse"] > 2 * by["quadratic"]["rmse"]


@pytest.mark.slow
def test_derivative_rmse_quadratic_large_n():
    rows = derivative_rmse_experiment(functions=("quadratic",), ns=(100_000,), replicates=20)
    assert rows[0]["rmse"] < 0.05 and rows[0]["failures"] == 0


# --- emulation ----------------------------------------------------------------


def test_synthetic_population_shape():
    pop = synthetic_population()
    assert pop.n == 1477 and np.unique(pop.x).size == 1477
    assert pop.domain == (pytest.approx(-0.005), pytest.approx(1.005))
    assert synthetic_population() == pop


def test_emulate_full_budget_recovers_truth():
    pop = synthetic_population(seed=3, size=300)
    rep = emulate_population(pop, 0.5625, 300, procedures=("POSIRP-Wald", "POSIRP-LR"))
    for proc in ("POSIRP-Wald", "POSIRP-LR"):
        assert rep.row(proc)["bias"] == 0.0
    with pytest.raises(BudgetExceedsPopulation):
        emulate_population(pop, 0.5625, 301)


def test_emulate_table_shape_and_round_trip():
    pop = synthetic_population()
    rep = emulate_population(pop, 0.5625, 80, p=0.5)
    assert rep.row("PTSIRP-LR")["n"] == "40/40"
    assert rep.row("POSIRP-LR")["n"] == "80"
    for r in rep.rows:
        assert {"estimator", "bias", "lower", "upper", "coverage", "length", "n"} <= set(r)
    assert EmulationReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
    assert rep.to_csv().splitlines()[0].startswith("estimator,n,point,bias")


def test_known_nuisance_reaches_comparator_stage_one():
    f = FUNCTIONS["isosine"]

    def run(**known):
        oracle = SimulationOracle(f.m, 0.1, np.random.default_rng(12))
        return run_procedure("PABLTSP-lite", oracle, 500, 0.5625, **known)[0]

    est = run()
    known = run(known_sigma2=0.01, known_deriv=float(f.m_prime(0.5)))
    # same stage-one data; the true (smaller) slope widens the stage-two window
    assert known.inputs["n"] == est.inputs["n"] == 150
    assert known.point != est.point
