"""Monte Carlo harness for size, power and band coverage.

Data come from the heteroscedastic quadratic design

    Y = 0.1 U + X + X^2 U,   X = sqrt(rho) Z_i + sqrt(1 - rho) eps_ik,

with ``U ~ N(0, 1/3)`` equicorrelated within clusters, whose conditional
quantile function is ``(Phi^-1(tau)/sqrt(300), 1, Phi^-1(tau)/sqrt(3))`` in
the regressors ``(1, X, X^2)``.  Every replication draws its data and its
bootstrap weights from keyed substreams, so tables do not depend on the
number of worker threads.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtri

from . import rng
from .bootstrap import WeightDistribution, bootstrap_ensemble
from .covariance import CovarianceFunction, analytical_covariance, bootstrap_covariance, standard_errors
from .dataset import ClusteredDataset
from .errors import InputError, SolverError
from .inference import (
    Hypothesis,
    WeightKind,
    confidence_bands,
    default_grid,
    pointwise_wald,
    test,
)
from .solver import CoefficientProcess, QuantileGrid, fit_process

if TYPE_CHECKING:
    import os

    from numpy.typing import NDArray

log = logging.getLogger(__name__)

COLUMNS = ("(intercept)", "x", "x^2")

POINTWISE_METHODS = ("BootstrapCV", "BootstrapSE", "AnalyticalClustered", "AnalyticalPlain")
UNIFORM_METHODS = ("KsBootWald", "KsAnalytical", "KsUnweighted")
BAND_METHODS = ("BandBootVariance", "BandAnalytical", "BandUnweighted")


@dataclass(frozen=True)
class McConfig:
    n_clusters: int = 20
    rho: float = 0.0
    c_min: int = 5
    c_max: int = 15
    m: int = 299
    reps: int = 500
    dist: WeightDistribution = WeightDistribution.MAMMEN
    alpha: float = 0.05
    grid: QuantileGrid = field(default_factory=lambda: default_grid(0.1, 0.9, 10))
    seed: rng.Seed = 0
    rho_x: float | None = None
    rho_u: float | None = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "dist", WeightDistribution.parse(self.dist))
        object.__setattr__(self, "seed", rng.as_key(self.seed))
        if self.n_clusters < 2:
            raise InputError("need at least two clusters")
        if not 1 <= self.c_min <= self.c_max:
            raise InputError(f"need 1 <= c_min <= c_max, got {self.c_min}, {self.c_max}")
        for name in ("rho", "rho_x", "rho_u"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v < 1.0:
                raise InputError(f"{name} must lie in [0, 1), got {v}")
        if self.reps < 1:
            raise InputError("reps must be at least 1")
        if self.m < 2:
            raise InputError("m must be at least 2")
        if not 0.0 < self.alpha <= 1.0:
            raise InputError("alpha must lie in (0, 1]")
        if self.threads < 1:
            raise InputError("threads must be at least 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = self.grid.taus.tolist()
        out["dist"] = self.dist.value
        out["seed"] = list(self.seed)
        return out


def equicorrelation(rho_x: float, rho_u: float) -> float:
    """Within-cluster correlation of U making ``corr(X^2 U)`` equal ``rho_u``, capped at 1."""
    return min(1.0, 3.0 * rho_u / (2.0 * rho_x * rho_x + 1.0))


def generate_dgp(cfg: McConfig, rep_index: int) -> ClusteredDataset:
    """Draw one Monte Carlo dataset with design ``(1, X, X^2)``."""
    rho_x = cfg.rho if cfg.rho_x is None else cfg.rho_x
    rho_u = cfg.rho if cfg.rho_u is None else cfg.rho_u
    lam = equicorrelation(rho_x, rho_u)
    g = rng.stream(cfg.seed, rng.DGP, rep_index)
    n = cfg.n_clusters
    sizes = g.integers(cfg.c_min, cfg.c_max + 1, size=n)
    N = int(sizes.sum())
    cluster = np.repeat(np.arange(n), sizes)
    Z = g.standard_normal(n)
    eps = g.standard_normal(N)
    V = g.standard_normal(n)
    eta = g.standard_normal(N)
    x = math.sqrt(rho_x) * Z[cluster] + math.sqrt(1.0 - rho_x) * eps
    u = math.sqrt(1.0 / 3.0) * (math.sqrt(lam) * V[cluster] + math.sqrt(1.0 - lam) * eta)
    y = 0.1 * u + x + x * x * u
    X = np.column_stack([np.ones(N), x, x * x])
    return ClusteredDataset.from_arrays(y, X, cluster, columns=COLUMNS)


def true_beta(tau: float) -> NDArray[np.float64]:
    if not 0.0 < tau < 1.0:
        raise InputError(f"tau must lie in (0, 1), got {tau}")
    q = float(ndtri(tau))
    return np.array([q / math.sqrt(300.0), 1.0, q / math.sqrt(3.0)])


def true_process(grid: QuantileGrid) -> NDArray[np.float64]:
    return np.stack([true_beta(t) for t in grid.taus])


@dataclass(frozen=True)
class HypothesisSpec:
    """``beta_coef(tau) = value`` on ``taus`` (the whole config grid if None)."""

    coef: int
    value: float
    taus: tuple[float, ...] | None = None

    def grid(self, cfg: McConfig) -> QuantileGrid:
        return cfg.grid if self.taus is None else cfg.grid.subset(self.taus)

    def label(self, tau: float | None = None) -> str:
        base = f"b{self.coef}={self.value:g}"
        if tau is not None:
            return f"{base}@{tau:g}"
        where = "all" if self.taus is None else ",".join(f"{t:g}" for t in self.taus)
        return f"{base}@{{{where}}}"


@dataclass(frozen=True)
class Cell:
    method: str
    param: str
    count: int
    reps: int

    @property
    def frequency(self) -> float:
        return self.count / self.reps

    @property
    def binomial_se(self) -> float:
        f = self.frequency
        return math.sqrt(f * (1.0 - f) / self.reps)


@dataclass(eq=False)
class RejectionTable:
    """Rejection (or coverage) frequencies keyed by ``(method, param)``.

    ``outcomes`` and ``statistics`` hold the per-replication decisions and
    test statistics behind every cell.
    """

    config: dict
    keys: list[tuple[str, str]]
    outcomes: dict[tuple[str, str], NDArray[np.bool_]]
    statistics: dict[tuple[str, str], NDArray[np.float64]]
    kind: str = "rejection"

    @property
    def cells(self) -> list[Cell]:
        return [
            Cell(m, p, int(self.outcomes[m, p].sum()), int(self.outcomes[m, p].shape[0]))
            for m, p in self.keys
        ]

    def cell(self, method: str, param: str) -> Cell:
        o = self.outcomes[method, param]
        return Cell(method, param, int(o.sum()), int(o.shape[0]))

    def frequency(self, method: str, param: str) -> float:
        return self.cell(method, param).frequency

    def rows(self) -> list[list[str]]:
        return [
            [c.method, c.param, repr(c.frequency), str(c.reps), repr(c.binomial_se), str(c.count)]
            for c in self.cells
        ]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["method", "param", "frequency", "reps", "binomial_se", "count"])
            wr.writerows(self.rows())

    def identical(self, other: RejectionTable) -> bool:
        """Bit-for-bit equality of keys, decisions and statistics."""
        if self.keys != other.keys:
            return False
        for k in self.keys:
            if not np.array_equal(self.outcomes[k], other.outcomes[k]):
                return False
            a, b = self.statistics[k], other.statistics[k]
            if a.tobytes() != b.tobytes():
                return False
        return True


@dataclass(frozen=True, eq=False)
class Replication:
    dataset: ClusteredDataset
    center: CoefficientProcess
    ensemble: object | None
    cov: CovarianceFunction | None


def replicate(cfg: McConfig, r: int, bootstrap: bool = True) -> Replication:
    """Data, fit and (optionally) bootstrap ensemble of replication ``r``.

    Bootstrap draws whose pseudo-observation still binds after doubling
    ``y*`` keep the augmented solution (counted in ``ensemble.binding``).
    A solver failure aborts with the replication index in its message and
    in the ``mc_replication`` attribute.
    """
    ds = generate_dgp(cfg, r)
    try:
        center = fit_process(ds, cfg.grid)
        if not bootstrap:
            return Replication(ds, center, None, None)
        ens = bootstrap_ensemble(
            ds, center, m=cfg.m, dist=cfg.dist, seed=cfg.seed + (rng.BOOTSTRAP, r), on_binding="accept"
        )
    except SolverError as exc:
        exc.mc_replication = r
        exc.args = (f"{exc} (Monte Carlo replication {r})",)
        raise
    return Replication(ds, center, ens, bootstrap_covariance(ens))


def _map_reps(cfg: McConfig, fn: Callable[[int], object]) -> list:
    if cfg.threads == 1 or cfg.reps == 1:
        return [fn(r) for r in range(cfg.reps)]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(fn, range(cfg.reps)))


def _single(cov: NDArray[np.float64], tau: float, n: int) -> CovarianceFunction:
    return CovarianceFunction(QuantileGrid([tau]), cov[None, None], n)


def _pointwise(rep: Replication, cfg: McConfig, spec: HypothesisSpec, tau: float, method: str):
    ds, center = rep.dataset, rep.center
    grid = QuantileGrid([tau])
    hyp = Hypothesis.coefficient(grid, ds.d, spec.coef, spec.value)
    if method == "BootstrapCV":
        # a single restriction: the decision does not depend on the weight
        res = test(ds, center, rep.ensemble, hyp, WeightKind.IDENTITY, cfg.alpha)
    elif method == "BootstrapSE":
        res = pointwise_wald(center.restrict(grid), rep.cov, hyp, tau, cfg.alpha)
    else:
        V = analytical_covariance(ds, center, tau, clustered=method == "AnalyticalClustered")
        res = pointwise_wald(center.restrict(grid), _single(V, tau, ds.n), hyp, tau, cfg.alpha)
    return res.reject, res.statistic


_KS_WEIGHTS = {
    "KsBootWald": WeightKind.BOOTSTRAP_WALD,
    "KsAnalytical": WeightKind.ANALYTICAL,
    "KsUnweighted": WeightKind.IDENTITY,
}


def run_size_power(
    cfg: McConfig,
    hypotheses: HypothesisSpec | Sequence[HypothesisSpec],
    methods: Iterable[str] = ("BootstrapCV", "BootstrapSE"),
) -> RejectionTable:
    """Rejection frequencies of every method and hypothesis on shared data.

    Pointwise methods produce one row per grid point of each hypothesis;
    uniform (KS) methods one row per hypothesis.
    """
    if isinstance(hypotheses, HypothesisSpec):
        hypotheses = [hypotheses]
    methods = list(methods)
    unknown = set(methods) - set(POINTWISE_METHODS) - set(UNIFORM_METHODS)
    if unknown:
        raise InputError(f"unknown methods {sorted(unknown)}")
    keys = []
    for spec in hypotheses:
        grid = spec.grid(cfg)
        for meth in methods:
            if meth in POINTWISE_METHODS:
                keys.extend((meth, spec.label(t)) for t in grid.taus)
            else:
                keys.append((meth, spec.label()))
    need_boot = any(m not in ("AnalyticalClustered", "AnalyticalPlain") for m in methods)

    def one(r: int):
        rep = replicate(cfg, r, need_boot)
        out = []
        for spec in hypotheses:
            grid = spec.grid(cfg)
            for meth in methods:
                if meth in POINTWISE_METHODS:
                    out.extend(_pointwise(rep, cfg, spec, t, meth) for t in grid.taus)
                else:
                    hyp = Hypothesis.coefficient(grid, rep.dataset.d, spec.coef, spec.value)
                    cov = rep.cov if grid == cfg.grid else None
                    res = test(rep.dataset, rep.center, rep.ensemble, hyp, _KS_WEIGHTS[meth], cfg.alpha, cov=cov)
                    out.append((res.reject, res.statistic))
        if (r + 1) % 50 == 0:
            log.info("size/power replication %d of %d", r + 1, cfg.reps)
        return out

    results = _map_reps(cfg, one)
    outcomes = {k: np.array([res[i][0] for res in results], dtype=bool) for i, k in enumerate(keys)}
    stats = {k: np.array([res[i][1] for res in results]) for i, k in enumerate(keys)}
    return RejectionTable(cfg.to_dict(), keys, outcomes, stats)


def run_coverage(
    cfg: McConfig,
    delta: Sequence[int] = (1, 2),
    methods: Iterable[str] = ("BandBootVariance",),
    q_override: float | None = None,
) -> RejectionTable:
    """Coverage of the true coefficient functions in ``delta`` by joint bands.

    ``q_override`` fixes the band critical value (testing hook).
    """
    methods = list(methods)
    unknown = set(methods) - set(BAND_METHODS)
    if unknown:
        raise InputError(f"unknown band methods {sorted(unknown)}")
    delta = tuple(int(j) for j in delta)
    param = "delta=" + ",".join(map(str, delta))
    keys = [(meth, param) for meth in methods]
    truth = true_process(cfg.grid)

    def one(r: int):
        rep = replicate(cfg, r)
        out = []
        for meth in methods:
            if meth == "BandBootVariance":
                band = confidence_bands(rep.ensemble, delta, "variance", cfg.alpha, q_override=q_override)
            elif meth == "BandUnweighted":
                band = confidence_bands(rep.ensemble, delta, "identity", cfg.alpha, q_override=q_override)
            else:
                lam = np.stack(
                    [np.diag(analytical_covariance(rep.dataset, rep.center, t))[list(delta)] for t in cfg.grid.taus]
                )
                band = confidence_bands(rep.ensemble, delta, "variance", cfg.alpha, lam=lam, q_override=q_override)
            out.append((band.contains(truth), band.q))
        if (r + 1) % 50 == 0:
            log.info("coverage replication %d of %d", r + 1, cfg.reps)
        return out

    results = _map_reps(cfg, one)
    outcomes = {k: np.array([res[i][0] for res in results], dtype=bool) for i, k in enumerate(keys)}
    stats = {k: np.array([res[i][1] for res in results]) for i, k in enumerate(keys)}
    return RejectionTable(cfg.to_dict(), keys, outcomes, stats, kind="coverage")


@dataclass(frozen=True, eq=False)
class SeStudy:
    """Per-replication estimate, bootstrap standard error and squared t statistic."""

    estimates: NDArray[np.float64]
    std_errors: NDArray[np.float64]
    wald: NDArray[np.float64]
    truth: float


def run_se_study(cfg: McConfig, coef: int, tau: float) -> SeStudy:
    """Sampling distribution of one coefficient against its bootstrap standard error."""
    g = cfg.grid.index(tau)
    truth = float(true_beta(tau)[coef])

    def one(r: int):
        rep = replicate(cfg, r)
        b = rep.center.betas[g, coef]
        se = standard_errors(rep.cov)[g, coef]
        return b, se, ((b - truth) / se) ** 2

    res = np.array(_map_reps(cfg, one))
    return SeStudy(res[:, 0], res[:, 1], res[:, 2], truth)
