"""Command-line entry point.

Exit status: 0 on success, 1 when inputs, flags or config fail validation,
2 when the computation itself fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .ci import lr_ci, wald_ci_one_stage
from .errors import IsoThreshError
from .iso_core import SampleBatch, invert_threshold, pava
from .limit_dist import LimitQuantiles, QuantileSource, cache_key, stream, tabulate_chernoff, tabulate_d
from .nuisance import deriv_floor, estimate_nuisance, estimate_sigma2, wald_constant
from .sim_harness import (
    PROCEDURES,
    ExperimentConfig,
    coverage_experiment,
    derivative_rmse_experiment,
    emulate_population,
    get_function,
    rate_experiment,
    rows_to_csv,
    synthetic_population,
)
from .twostage import (
    PopulationOracle,
    SimulationOracle,
    StagePlan,
    TwoStageConfig,
    allocate,
    multistage_rates,
    plan_stage_two,
    run_two_stage,
)


class UsageError(Exception):
    """Validation failure: bad flag, config key, or input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_csv(path) -> tuple:
    """Read ``x, y[, w]`` rows; a non-numeric first row is taken as a header."""
    rows = []
    ncol = None
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                vals = [float(f) for f in rec]
            except ValueError:
                if lineno == 1:
                    continue
                raise UsageError(f"{path}: line {lineno}: non-numeric field in {rec!r}") from None
            if len(vals) not in (2, 3):
                raise UsageError(f"{path}: line {lineno}: expected 2 or 3 columns, got {len(vals)}")
            if ncol is None:
                ncol = len(vals)
            elif len(vals) != ncol:
                raise UsageError(f"{path}: line {lineno}: expected {ncol} columns, got {len(vals)}")
            if not all(math.isfinite(v) for v in vals):
                raise UsageError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise UsageError(f"{path}: no data rows")
    arr = np.array(rows)
    w = arr[:, 2] if arr.shape[1] == 3 else None
    return arr[:, 0], arr[:, 1], w


def _load_sample(args, negate=False, stage="one") -> SampleBatch:
    x, y, w = read_csv(args.input)
    if negate:
        y = -y
    domain = tuple(args.domain) if args.domain else None
    try:
        return SampleBatch.from_arrays(x, y, w, domain=domain, stage=stage)
    except IsoThreshError as exc:
        raise UsageError(str(exc)) from None


def _quantiles(args) -> QuantileSource:
    z = LimitQuantiles.load(args.z_table) if getattr(args, "z_table", None) else None
    d = LimitQuantiles.load(args.d_table) if getattr(args, "d_table", None) else None
    return QuantileSource(z, d, preset=args.preset)


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _emit(args, result, csv_text=None) -> None:
    payload = json.dumps({"command": args.command, "config": _echo(args), "result": result},
                         indent=1, default=_json_default)
    if args.output:
        Path(args.output).write_text(payload + "\n", encoding="utf-8")
    else:
        sys.stdout.write(payload + "\n")
    if csv_text is not None and getattr(args, "csv", None):
        Path(args.csv).write_text(csv_text, encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


# --- subcommands ------------------------------------------------------------


def cmd_fit(args):
    s = _load_sample(args)
    return pava(s).to_dict()


def cmd_ci(args):
    s = _load_sample(args, negate=args.decreasing)
    theta0 = -args.theta0 if args.decreasing else args.theta0
    Q = _quantiles(args)
    a, b = s.domain
    if args.family == "lr":
        sigma2 = args.sigma2 if args.sigma2 is not None else estimate_sigma2(s)
        est = lr_ci(s, theta0, sigma2, Q("D", 1 - args.alpha), grid_size=args.grid_size,
                    level=1 - args.alpha)
    else:
        d = invert_threshold(pava(s), theta0)
        g = args.density if args.density is not None else 1.0 / (b - a)
        nu = estimate_nuisance(s, d, design_density=g)
        sigma2 = args.sigma2 if args.sigma2 is not None else nu.sigma2
        deriv = args.deriv if args.deriv is not None else nu.deriv
        c_hat = wald_constant(sigma2, deriv, deriv_floor(s))
        est = wald_ci_one_stage(d, s.n, c_hat, g, Q("Z", 1 - args.alpha / 2), (a, b),
                                1 - args.alpha, nu)
    return est.to_dict()


def cmd_plan(args):
    n1, n2 = allocate(args.n, args.p)
    Q = _quantiles(args)
    if args.family == "wald":
        if args.c_hat is None:
            raise UsageError("--family wald needs --c-hat")
        q = args.quantile if args.quantile is not None else Q("Z", 1 - args.beta / 2)
        ip = plan_stage_two(args.d1, n1, args.c_hat, args.g1, q, "wald", tuple(args.domain), n2=n2)
    else:
        if args.lr_interval is None:
            raise UsageError("--family lr needs --lr-interval L U")
        ip = plan_stage_two(args.d1, n1, family="lr", domain=tuple(args.domain),
                            stage1_lr_interval=tuple(args.lr_interval), n2=n2)
    plan = StagePlan(args.n, args.p, n1, n2, args.beta, ip.gamma1, ip.c1, ip.interval,
                     args.family, args.psi, ip.flags)
    return plan.to_dict()


def _two_stage_config(args, theta0, domain):
    return TwoStageConfig(n=args.n, theta0=theta0, domain=domain, p=args.p, beta=args.beta,
                          alpha=args.alpha, stage1=args.stage1, stage2=args.stage2, psi=args.psi,
                          grid_size=args.grid_size, combine=args.combine)


def cmd_run2(args):
    Q = _quantiles(args)
    if args.input:
        pop = _load_sample(args)
        if args.theta0 is None:
            raise UsageError("population mode needs --theta0")
        oracle = PopulationOracle(pop, targets=args.targets, rng=stream(args.seed, 1))
        cfg = _two_stage_config(args, args.theta0, pop.domain)
    else:
        f = get_function(args.function)
        theta0 = args.theta0 if args.theta0 is not None else float(f.m(args.d0))
        oracle = SimulationOracle(f.m, args.sigma, stream(args.seed, 0), f.domain)
        cfg = _two_stage_config(args, theta0, f.domain)
    res = run_two_stage(oracle, cfg, Q, keep_samples=args.keep_samples)
    return res.to_dict(include_samples=args.keep_samples)


def cmd_simulate(args):
    Q = _quantiles(args)
    if args.kind == "coverage":
        cfg = ExperimentConfig(functions=tuple(args.functions), d0s=tuple(args.d0s),
                               sigmas=tuple(args.sigmas), ns=tuple(args.ns),
                               procedures=tuple(args.procedures), replicates=args.replicates,
                               seed=args.seed, threads=args.threads, p=args.p,
                               alpha=args.alpha, beta=args.beta, grid_size=args.grid_size,
                               known_nuisance=args.known_nuisance)
        rep = coverage_experiment(cfg, Q)
        return rep.to_dict(), rep.to_csv(), rep.failed
    if args.kind == "rate":
        rep = rate_experiment(args.functions[0], args.d0s[0], args.sigmas[0], args.ns,
                              replicates=args.replicates, seed=args.seed, threads=args.threads,
                              p=args.p if args.p is not None else 0.25, beta=args.beta, quantiles=Q)
        return rep.to_dict(), rep.to_csv(), False
    rows = derivative_rmse_experiment(args.functions, args.d0s[0], args.sigmas, args.ns,
                                      args.replicates, args.seed, args.threads)
    return rows, rows_to_csv(rows), False


def cmd_emulate(args):
    if args.input:
        x, y, w = read_csv(args.input)
        pop = SampleBatch.from_arrays(x, y, w, ties="jitter", jitter_eps=args.jitter,
                                      rng=stream(args.seed, 2))
        if args.theta0 is None:
            raise UsageError("emulation on a data file needs --theta0")
        theta0 = args.theta0
    else:
        pop = synthetic_population(seed=args.seed)
        theta0 = args.theta0 if args.theta0 is not None else float(get_function("isosine").m(0.5))
    rep = emulate_population(pop, theta0, args.budget, args.p, tuple(args.procedures),
                             seed=args.seed, targets=args.targets, grid_size=args.grid_size,
                             quantiles=_quantiles(args))
    return rep.to_dict(), rep.to_csv()


def _cache_dir(args) -> Path:
    if args.cache_dir:
        return Path(args.cache_dir)
    base = Path(args.output).resolve().parent if args.output else Path.cwd()
    return base / ".isothresh-cache"


def cmd_tabulate(args):
    if args.dist == "Z":
        meta = {"paths": args.paths, "half_width": args.half_width, "step": args.step,
                "seed": args.seed}
    else:
        meta = {"outer": args.outer, "inner_n": args.inner_n, "seed": args.seed}
    key = cache_key(args.dist, meta)
    cdir = _cache_dir(args)
    cached = cdir / f"{args.dist}-{key}.json"
    if cached.exists():
        table = LimitQuantiles.load(cached)
        hit = True
    else:
        if args.dist == "Z":
            table = tabulate_chernoff(args.paths, args.half_width, args.step, args.seed,
                                      threads=args.threads)
        else:
            table = tabulate_d(args.outer, args.inner_n, args.seed, threads=args.threads)
        cdir.mkdir(parents=True, exist_ok=True)
        table.save(cached)
        hit = False
    return table.to_dict(), {"cache_file": str(cached), "cache_hit": hit, "cache_key": key}


def _parse_exponent(text):
    try:
        return Fraction(text) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"not a number: {text!r}") from None


def cmd_rates(args):
    g1, eta = _parse_exponent(args.gamma1), _parse_exponent(args.eta)
    if isinstance(g1, Fraction) and isinstance(eta, float) and eta == 0:
        eta = Fraction(0)
    r = multistage_rates(args.k, g1, eta)
    exact = isinstance(r.lower_bound, Fraction)
    rows = [{"stage": i + 1, "gamma": float(g), "rate": float(rt),
             **({"gamma_exact": str(g), "rate_exact": str(rt)} if exact else {})}
            for i, (g, rt) in enumerate(zip(r.gammas, r.rates))]
    out = {"stages": rows, "final_rate": float(r.final_rate),
           "lower_bound": float(r.lower_bound)}
    if exact:
        out.update(final_rate_exact=str(r.final_rate), lower_bound_exact=str(r.lower_bound))
    return out


# --- parser -----------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.add_argument("--output", "-o", help="output JSON path (stdout when omitted)")


def _tables(p):
    p.add_argument("--z-table", help="LimitQuantiles JSON for Z (default: embedded table)")
    p.add_argument("--d-table", help="LimitQuantiles JSON for D (default: embedded table)")
    p.add_argument("--preset", choices=["paper_conservative", "tabulated"],
                   default="paper_conservative")


def _two_stage_flags(p):
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--p", type=float, default=0.25)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--stage1", choices=["wald", "lr"], default="lr")
    p.add_argument("--stage2", choices=["wald", "lr"], default="lr")
    p.add_argument("--psi", choices=["uniform", "triangular", "epanechnikov"], default="uniform")
    p.add_argument("--grid-size", type=int, default=2001)
    p.add_argument("--combine", action=argparse.BooleanOptionalAction, default=None,
                   help="pool both stages for the final interval (default: when n < 200)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="isothresh", description="Isotonic threshold estimation and intervals.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="isotonic fit of a CSV sample")
    _common(p)
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--domain", type=float, nargs=2, metavar=("A", "B"))
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ci", help="one-stage Wald or LR interval")
    _common(p)
    _tables(p)
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--theta0", type=float, required=True)
    p.add_argument("--family", choices=["wald", "lr"], default="lr")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--domain", type=float, nargs=2, metavar=("A", "B"))
    p.add_argument("--sigma2", type=float, help="known noise variance")
    p.add_argument("--deriv", type=float, help="known slope at the threshold (wald)")
    p.add_argument("--density", type=float, help="design density at the threshold (wald)")
    p.add_argument("--grid-size", type=int, default=2001)
    p.add_argument("--decreasing", action="store_true",
                   help="nonincreasing regression: negate y and theta0")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("plan", help="budget split and stage-two interval")
    _common(p)
    _tables(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=float, default=0.25)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--d1", type=float, required=True)
    p.add_argument("--family", choices=["wald", "lr"], default="wald")
    p.add_argument("--c-hat", type=float)
    p.add_argument("--g1", type=float, default=1.0)
    p.add_argument("--quantile", type=float, help="override q(Z, 1 - beta/2)")
    p.add_argument("--lr-interval", type=float, nargs=2, metavar=("L", "U"))
    p.add_argument("--domain", type=float, nargs=2, default=[0.0, 1.0], metavar=("A", "B"))
    p.add_argument("--psi", default="uniform")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run2", help="full two-stage run (simulated or population)")
    _common(p)
    _tables(p)
    _two_stage_flags(p)
    p.add_argument("--input", "-i", help="population CSV; simulate from --function otherwise")
    p.add_argument("--domain", type=float, nargs=2, metavar=("A", "B"))
    p.add_argument("--targets", choices=["equispaced", "random"], default="equispaced")
    p.add_argument("--function", default="quadratic")
    p.add_argument("--d0", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--theta0", type=float)
    p.add_argument("--keep-samples", action="store_true")
    p.set_defaults(func=cmd_run2)

    p = sub.add_parser("simulate", help="coverage, rate or slope-RMSE experiment")
    _common(p)
    _tables(p)
    p.add_argument("--kind", choices=["coverage", "rate", "derivative"], default="coverage")
    p.add_argument("--functions", nargs="+", default=["quadratic"])
    p.add_argument("--d0s", type=float, nargs="+", default=[0.5])
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.1])
    p.add_argument("--ns", type=int, nargs="+", default=[500])
    p.add_argument("--procedures", nargs="+", default=["POSIRP-LR", "PTSIRP-LR"])
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--p", type=float, help="stage-one share (default per procedure)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--grid-size", type=int, default=2001)
    p.add_argument("--known-nuisance", action="store_true")
    p.add_argument("--csv", help="flat CSV report path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("emulate", help="budgeted sampling from a finite population")
    _common(p)
    _tables(p)
    p.add_argument("--input", "-i", help="population CSV (synthetic stand-in when omitted)")
    p.add_argument("--theta0", type=float)
    p.add_argument("--budget", type=int, default=80)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--procedures", nargs="+",
                   default=["POSIRP-Wald", "POSIRP-LR", "PTSIRP-Wald", "PTSIRP-LR"])
    p.add_argument("--targets", choices=["equispaced", "random"], default="equispaced")
    p.add_argument("--jitter", type=float, default=1.0, help="tie jitter half-width for data files")
    p.add_argument("--grid-size", type=int, default=2001)
    p.add_argument("--csv", help="flat CSV report path")
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("tabulate", help="Monte Carlo quantile table for Z or D")
    _common(p)
    p.add_argument("--dist", choices=["Z", "D"], required=True)
    p.add_argument("--paths", type=int, default=200_000)
    p.add_argument("--half-width", type=float, default=3.0)
    p.add_argument("--step", type=float, default=0.002)
    p.add_argument("--outer", type=int, default=100_000)
    p.add_argument("--inner-n", type=int, default=5000)
    p.add_argument("--cache-dir", help="table cache directory (default: next to --output)")
    p.set_defaults(func=cmd_tabulate)

    p = sub.add_parser("rates", help="multistage exponents and rates")
    _common(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--gamma1", default="1/3", help="decimal or fraction such as 1/3")
    p.add_argument("--eta", default="0")
    p.set_defaults(func=cmd_rates)
    return ap


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _load_overrides(path):
    try:
        with open(path, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in overrides.items()}


def parse_args(argv):
    ap = build_parser()
    path = _config_path(argv)
    if path is not None and argv and argv[0] in ap._subparsers._group_actions[0].choices:
        # config values become defaults, so explicit flags still win
        sub = ap._subparsers._group_actions[0].choices[argv[0]]
        overrides = _load_overrides(path)
        known = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in overrides:
                action.required = False
        sub.set_defaults(**overrides)
    args = ap.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be at least 1")
    for name in ("procedures",):
        for proc in getattr(args, name, None) or ():
            if proc not in PROCEDURES:
                raise UsageError(f"unknown procedure {proc!r}")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"isothresh: error: {exc}", file=sys.stderr)
        return 1
    try:
        out = args.func(args)
    except UsageError as exc:
        print(f"isothresh: error: {exc}", file=sys.stderr)
        return 1
    except (IsoThreshError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"isothresh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    status = 0
    if args.command == "simulate":
        result, csv_text, failed = out
        _emit(args, result, csv_text)
        status = 2 if failed else 0
    elif args.command == "emulate":
        _emit(args, *out)
    elif args.command == "tabulate":
        table, info = out
        _emit(args, {"table": table, **info})
    else:
        _emit(args, out)
    return status


if __name__ == "__main__":
    sys.exit(main())
