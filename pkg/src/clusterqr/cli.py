"""Command-line interface: ``clusterqr {fit,test,band,mc}``.

Every command writes its outputs and a ``manifest.json`` into ``--out``.
The manifest records the resolved configuration, the seed, a digest of
the input file and of every output, the package version and the run time.
Outputs other than the manifest are byte-identical across reruns with the
same inputs, flags and seed, for any ``--threads``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bootstrap import DEFAULT_M, WeightDistribution, bootstrap_ensemble, write_ensemble
from .covariance import bootstrap_covariance, standard_errors
from .dataset import ClusteredDataset, load_csv
from .errors import InputError, NearSingularWeight, PseudoObservationBinding, SolverError
from .inference import (
    Hypothesis,
    WeightKind,
    confidence_bands,
    default_grid,
    pointwise_wald,
    test,
)
from .montecarlo import (
    POINTWISE_METHODS,
    UNIFORM_METHODS,
    HypothesisSpec,
    McConfig,
    run_coverage,
    run_size_power,
)
from .solver import QuantileGrid, fit_process

log = logging.getLogger("clusterqr")

SEED_ENV = "CLUSTERQR_SEED"
EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_WEIGHT = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- parsing helpers


def parse_grid(taus: str | None, grid_n: int | None, t_range: str) -> QuantileGrid:
    """``lo:hi:step``, a comma list, or the ``j/N`` construction on ``t_range``."""
    if taus is not None and grid_n is not None:
        raise InputError("use either --taus or --grid-n, not both")
    if grid_n is not None:
        lo, hi = _floats(t_range, 2, "--t-range")
        return default_grid(lo, hi, grid_n)
    if taus is None:
        return default_grid(0.1, 0.9, 10)
    if ":" in taus:
        lo, hi, step = _floats(taus.replace(":", ","), 3, "--taus")
        if not step > 0.0:
            raise InputError("--taus step must be positive")
        k = int(np.floor((hi - lo) / step + 1e-9))
        # round away representation noise so 0.1:0.9:0.1 gives exactly 0.3, 0.7, ...
        return QuantileGrid([round(lo + j * step, 12) for j in range(k + 1)])
    return QuantileGrid(_floats(taus, None, "--taus"))


def _floats(text: str, count: int | None, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{flag}: cannot parse {text!r}") from None
    if count is not None and len(vals) != count:
        raise InputError(f"{flag}: expected {count} numbers, got {text!r}")
    return vals


def _column(ds: ClusteredDataset, key: str) -> int:
    return ds.column_index(int(key) if key.lstrip("-").isdigit() else key)


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None


def _digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load(args) -> ClusteredDataset:
    covs = None if args.covariates is None else [c.strip() for c in args.covariates.split(",") if c.strip()]
    if covs is None:
        if args.no_header:
            raise InputError("--covariates is required with --no-header")
        with open(args.data, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
        covs = [h for h in header if h not in (args.cluster, args.response)]
    return load_csv(
        args.data,
        cluster_column=args.cluster,
        response_column=args.response,
        covariate_columns=covs,
        has_header=not args.no_header,
        add_intercept=not args.no_intercept,
    )


# ---------------------------------------------------------------- outputs


class Run:
    """Collects output files and writes the manifest."""

    def __init__(self, command: str, args, seed: int):
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.start = time.perf_counter()
        self.config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "threads")}
        self.seed = seed
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.input_digest = _digest(args.data) if getattr(args, "data", None) else None

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "input_digest": self.input_digest,
            "version": __version__,
            "outputs": {p.name: _digest(p) for p in self.outputs},
            **self.extra,
            "timing": {"seconds": round(time.perf_counter() - self.start, 3)},
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fit_and_bootstrap(args, seed: int):
    ds = _load(args)
    grid = parse_grid(args.taus, args.grid_n, args.t_range)
    center = fit_process(ds, grid)
    ens = bootstrap_ensemble(
        ds, center, m=args.m, dist=args.dist, seed=seed, threads=args.threads, on_binding=args.on_binding
    )
    return ds, grid, center, ens


# ---------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    seed = _seed(args.seed)
    run = Run("fit", args, seed)
    ds, grid, center, ens = _fit_and_bootstrap(args, seed)
    se = standard_errors(bootstrap_covariance(ens))
    with open(run.path("coefficients.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["tau", "coef", "estimate", "se"])
        for g, tau in enumerate(grid.taus):
            for j, name in enumerate(ds.columns):
                wr.writerow([repr(float(tau)), name, repr(float(center.betas[g, j])), repr(float(se[g, j]))])
    if args.save_ensemble:
        write_ensemble(ens, run.path("ensemble.csv"))
    run.extra["retries"] = ens.retries
    run.extra["binding"] = ens.binding
    run.finish()
    for g, tau in enumerate(grid.taus):
        cells = "  ".join(f"{n}={b:.6g} ({s:.3g})" for n, b, s in zip(ds.columns, center.betas[g], se[g]))
        print(f"tau={tau:g}  {cells}")
    return EXIT_OK


def read_restrictions(path: str, grid: QuantileGrid, d: int) -> Hypothesis:
    """Restriction file: header ``tau,rhs,<d coefficient columns>``, one row per restriction."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != d + 2:
        raise InputError(f"{path}: expected {d + 2} columns (tau, rhs, {d} coefficients)")
    rows: dict[int, list] = {}
    for row in data:
        rows.setdefault(grid.index(row[0]), []).append(row)
    if len(rows) != len(grid):
        raise InputError(f"{path}: restrictions must cover every grid point")
    h = {len(v) for v in rows.values()}
    if len(h) != 1:
        raise InputError(f"{path}: every grid point needs the same number of restrictions")
    R = np.stack([np.array([r[2:] for r in rows[g]]) for g in range(len(grid))])
    r = np.stack([np.array([r[1] for r in rows[g]]) for g in range(len(grid))])
    return Hypothesis(grid, R, r)


def cmd_test(args) -> int:
    seed = _seed(args.seed)
    if (args.coef is None) == (args.restrictions is None):
        raise InputError("give either --coef (with --value) or --restrictions")
    run = Run("test", args, seed)
    ds, grid, center, ens = _fit_and_bootstrap(args, seed)
    if args.restrictions is not None:
        hyp = read_restrictions(args.restrictions, grid, ds.d)
    else:
        hyp = Hypothesis.coefficient(grid, ds.d, _column(ds, args.coef), args.value)
    if args.chi2:
        cov = bootstrap_covariance(ens)
        results = [pointwise_wald(center, cov, hyp, t, args.alpha) for t in grid.taus]
        payload = {"pointwise": [r.to_dict(include_stats=False) for r in results]}
        lines = [
            f"tau={r.details['tau']:g}  W={r.statistic:.6g}  chi2 cv={r.critical_value:.6g}  "
            f"p={r.p_value:.4g}  reject={r.reject}"
            for r in results
        ]
    else:
        res = test(ds, center, ens, hyp, args.weight, args.alpha)
        payload = res.to_dict()
        lines = [
            f"K={res.statistic:.6g} (at tau={res.details['argmax_tau']:g})  "
            f"q={res.critical_value:.6g}  p={res.p_value:.4g}  reject={res.reject}"
        ]
    payload["manifest"] = "manifest.json"
    with open(run.path("test.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.finish()
    print("\n".join(lines))
    return EXIT_OK


def cmd_band(args) -> int:
    seed = _seed(args.seed)
    run = Run("band", args, seed)
    ds, grid, center, ens = _fit_and_bootstrap(args, seed)
    delta = None if args.delta is None else [_column(ds, k.strip()) for k in args.delta.split(",")]
    band = confidence_bands(ens, delta, args.lambda_kind, args.alpha)
    band.write_csv(run.path("band.csv"), names=ds.columns)
    run.extra["q"] = band.q
    run.finish()
    print(f"q={band.q:.6g}  coefficients={[ds.columns[j] for j in band.delta]}  grid points={len(grid)}")
    return EXIT_OK


_MC_DEFAULTS = {
    "size-power": {"taus": "0.5", "coef": 2, "value": 0.0, "methods": ",".join(POINTWISE_METHODS)},
    "uniform": {"taus": "0.1:0.9:0.1", "coef": 1, "value": 1.0, "methods": ",".join(UNIFORM_METHODS)},
    "coverage": {"taus": "0.1:0.9:0.1", "methods": "BandBootVariance"},
}


def cmd_mc(args) -> int:
    seed = _seed(args.seed)
    run = Run("mc", args, seed)
    defaults = _MC_DEFAULTS[args.experiment]
    taus = args.taus if args.taus is not None or args.grid_n is not None else defaults["taus"]
    cfg = McConfig(
        n_clusters=args.n,
        rho=args.rho,
        c_min=args.c_min,
        c_max=args.c_max,
        m=args.m,
        reps=args.reps,
        dist=args.dist,
        alpha=args.alpha,
        grid=parse_grid(taus, args.grid_n, args.t_range),
        seed=seed,
        rho_x=args.rho_x,
        rho_u=args.rho_u,
        threads=args.threads,
    )
    methods = [s.strip() for s in (args.methods or defaults["methods"]).split(",") if s.strip()]
    if args.experiment == "coverage":
        delta = [int(k) for k in (args.delta or "1,2").split(",")]
        table = run_coverage(cfg, delta, methods)
    else:
        coef = defaults["coef"] if args.coef is None else int(args.coef)
        value = defaults["value"] if args.value is None else args.value
        table = run_size_power(cfg, HypothesisSpec(coef, value), methods)
    table.write_csv(run.path("table.csv"))
    run.config = {**run.config, "resolved": cfg.to_dict(), "methods": methods}
    run.finish()
    for c in table.cells:
        print(f"{c.method:20s} {c.param:24s} {c.frequency:.3f}  (se {c.binomial_se:.3f}, reps {c.reps})")
    return EXIT_OK


# ---------------------------------------------------------------- argument parser


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("data", help="input CSV file")
    p.add_argument("--cluster", default="cluster", help="cluster label column (name or index)")
    p.add_argument("--response", default="y", help="response column (name or index)")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    p.add_argument("--no-header", action="store_true", help="the file has no header row")
    p.add_argument("--no-intercept", action="store_true", help="do not prepend a constant column")


def _add_grid(p: argparse.ArgumentParser) -> None:
    p.add_argument("--taus", help="quantile grid: lo:hi:step or a comma list")
    p.add_argument("--grid-n", type=int, help="grid {j/N} intersected with --t-range")
    p.add_argument("--t-range", default="0.1,0.9", help="range for --grid-n (default 0.1,0.9)")


def _add_bootstrap(p: argparse.ArgumentParser, binding: bool = True) -> None:
    p.add_argument("--m", type=int, default=DEFAULT_M, help="bootstrap replications (default 299)")
    p.add_argument(
        "--dist", default="mammen", choices=[d.value for d in WeightDistribution], help="weight distribution"
    )
    p.add_argument("--seed", type=int, help=f"RNG seed (default ${SEED_ENV} or 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level (default 0.05)")
    if binding:
        p.add_argument(
            "--on-binding",
            default="raise",
            choices=["raise", "accept"],
            help="a pseudo-observation that still binds after doubling y* aborts (raise, default) "
            "or keeps the augmented solution (accept)",
        )
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clusterqr", description="Cluster-robust quantile regression inference.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="coefficients and bootstrap standard errors")
    _add_data(p)
    _add_grid(p)
    _add_bootstrap(p)
    p.add_argument("--save-ensemble", action="store_true", help="also write the bootstrap draws")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="bootstrap Kolmogorov-Smirnov or chi-square Wald test")
    _add_data(p)
    _add_grid(p)
    _add_bootstrap(p)
    p.add_argument("--coef", help="coefficient under test (name or index)")
    p.add_argument("--value", type=float, default=0.0, help="hypothesized value (default 0)")
    p.add_argument("--restrictions", help="CSV with columns tau,rhs,<one per coefficient>")
    p.add_argument("--weight", default="wald", choices=[w.value for w in WeightKind], help="KS weight")
    p.add_argument("--chi2", action="store_true", help="pointwise chi-square Wald tests instead")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("band", help="uniform confidence band over the grid")
    _add_data(p)
    _add_grid(p)
    _add_bootstrap(p)
    p.add_argument("--delta", help="coefficients in the band (names or indices; default all)")
    p.add_argument(
        "--lambda", dest="lambda_kind", default="variance", choices=["variance", "identity"], help="band scaling"
    )
    p.set_defaults(func=cmd_band)

    p = sub.add_parser("mc", help="Monte Carlo size, power and coverage experiments")
    p.add_argument("--experiment", required=True, choices=sorted(_MC_DEFAULTS))
    _add_grid(p)
    _add_bootstrap(p, binding=False)
    p.add_argument("--n", type=int, default=20, help="number of clusters")
    p.add_argument("--rho", type=float, default=0.0, help="within-cluster correlation")
    p.add_argument("--rho-x", type=float, help="separate correlation of X")
    p.add_argument("--rho-u", type=float, help="separate target correlation of X^2 U")
    p.add_argument("--c-min", type=int, default=5)
    p.add_argument("--c-max", type=int, default=15)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--coef", help="coefficient index under test")
    p.add_argument("--value", type=float, help="hypothesized value")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--delta", help="band coefficient indices (coverage; default 1,2)")
    p.set_defaults(func=cmd_mc)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise InputError("--threads must be at least 1")
        return args.func(args)
    except NearSingularWeight as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WEIGHT
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PseudoObservationBinding as exc:
        print(f"error: {exc}; rerun with --on-binding accept to keep such draws", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
