"""Wild gradient bootstrap for clustered quantile regression.

One replication draws a weight per cluster, perturbs the sample gradient
at the original estimate with those weights, and re-solves the quantile
regression with a single pseudo-observation that encodes the linear
perturbation.  The same weight vector perturbs every quantile of the
grid, so each replication is a whole coefficient process.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import _fn, rng
from .errors import (
    DimensionMismatch,
    InputError,
    InsufficientDraws,
    PseudoObservationBinding,
    SolverDidNotConverge,
)
from .solver import (
    BINDING_RTOL,
    GAP_TOL,
    MAX_ITER,
    CoefficientProcess,
    PseudoObservation,
    QuantileGrid,
    fitted_residuals,
    psi,
    solve,
)

if TYPE_CHECKING:
    import os

    from numpy.typing import ArrayLike, NDArray

    from .dataset import ClusteredDataset

DEFAULT_M = 299
ENSEMBLE_FORMAT = "clusterqr-ensemble v1"

_SQRT5 = math.sqrt(5.0)
MAMMEN_LOW = -(_SQRT5 - 1.0) / 2.0
MAMMEN_HIGH = (_SQRT5 + 1.0) / 2.0
MAMMEN_P_LOW = (_SQRT5 + 1.0) / (2.0 * _SQRT5)
WEBB_POINTS = np.array(
    [-math.sqrt(1.5), -1.0, -math.sqrt(0.5), math.sqrt(0.5), 1.0, math.sqrt(1.5)]
)


class WeightDistribution(str, enum.Enum):
    """Bootstrap multiplier distributions; all but ``ZERO`` have mean 0, variance 1."""

    MAMMEN = "mammen"
    RADEMACHER = "rademacher"
    WEBB = "webb"
    NORMAL = "normal"
    EXPONENTIAL = "exponential"
    ZERO = "degenerate-zero"  # testing only

    @classmethod
    def parse(cls, value: str | WeightDistribution) -> WeightDistribution:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(d.value for d in cls)
            raise InputError(f"unknown weight distribution {value!r}; choose from {names}") from None


def draw_weights(
    dist: WeightDistribution | str, n: int, stream: np.random.Generator
) -> NDArray[np.float64]:
    """Draw ``n`` iid bootstrap weights."""
    dist = WeightDistribution.parse(dist)
    if n < 1:
        raise InputError("need at least one weight")
    if dist is WeightDistribution.MAMMEN:
        return np.where(stream.random(n) < MAMMEN_P_LOW, MAMMEN_LOW, MAMMEN_HIGH)
    if dist is WeightDistribution.RADEMACHER:
        return np.where(stream.random(n) < 0.5, -1.0, 1.0)
    if dist is WeightDistribution.WEBB:
        return WEBB_POINTS[stream.integers(0, 6, size=n)]
    if dist is WeightDistribution.NORMAL:
        return stream.standard_normal(n)
    if dist is WeightDistribution.EXPONENTIAL:
        return stream.standard_exponential(n) - 1.0
    return np.zeros(n)


def cluster_scores(dataset: ClusteredDataset, center: CoefficientProcess) -> NDArray[np.float64]:
    """Per-cluster score sums ``sum_k psi_tau(residual) x``, shape (G, n, d)."""
    if center.d != dataset.d:
        raise DimensionMismatch(f"center has d={center.d}, dataset has d={dataset.d}")
    out = np.empty((len(center.grid), dataset.n, dataset.d))
    for g, tau in enumerate(center.grid.taus):
        res = fitted_residuals(dataset.X, dataset.y, center.betas[g])
        out[g] = dataset.cluster_sums(psi(res, tau)[:, None] * dataset.X)
    return out


def gradient_process(
    dataset: ClusteredDataset, center: CoefficientProcess, weights: ArrayLike
) -> NDArray[np.float64]:
    """Bootstrap gradient at the original estimate for every grid point, shape (G, d)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dataset.n,):
        raise DimensionMismatch(f"expected {dataset.n} weights, got shape {w.shape}")
    scores = cluster_scores(dataset, center)
    return np.einsum("i,gid->gd", w, scores) / math.sqrt(dataset.n)


def pseudo_observation(w_tau: ArrayLike, tau: float, y_star: float, n: int) -> PseudoObservation:
    """Pseudo-observation ``(y*, -sqrt(n) w_tau / tau)`` for one quantile."""
    if not 0.0 < tau < 1.0:
        raise InputError(f"tau must lie in (0, 1), got {tau}")
    w_tau = np.asarray(w_tau, dtype=np.float64)
    return PseudoObservation(float(y_star), -math.sqrt(n) * w_tau / tau)


def y_star(dataset: ClusteredDataset) -> float:
    """``n * max c_i * max |Y|``, with ``max |Y|`` replaced by 1 for all-zero responses."""
    ymax = float(np.max(np.abs(dataset.y)))
    if ymax == 0.0:
        ymax = 1.0
    return dataset.n * int(dataset.sizes.max()) * ymax


@dataclass(frozen=True, eq=False)
class BootstrapEnsemble:
    """Bootstrap coefficient processes; ``draws`` has shape (m, G, d)."""

    center: CoefficientProcess
    draws: NDArray[np.float64]
    n_clusters: int
    seed: tuple[int, ...]
    distribution: WeightDistribution
    y_star: float
    retries: int = 0
    iterations: NDArray[np.int64] | None = field(default=None, repr=False)
    binding: int = 0

    def __post_init__(self):
        if self.draws.ndim != 3 or self.draws.shape[1:] != self.center.betas.shape:
            raise DimensionMismatch(
                f"draws shape {self.draws.shape} incompatible with center {self.center.betas.shape}"
            )
        if self.draws.shape[0] < 2:
            raise InsufficientDraws("an ensemble needs m >= 2 draws")

    @property
    def grid(self) -> QuantileGrid:
        return self.center.grid

    @property
    def m(self) -> int:
        return self.draws.shape[0]

    def restrict(self, grid: QuantileGrid) -> BootstrapEnsemble:
        idx = [self.grid.index(t) for t in grid.taus]
        return BootstrapEnsemble(
            self.center.restrict(grid),
            self.draws[:, idx],
            self.n_clusters,
            self.seed,
            self.distribution,
            self.y_star,
            self.retries,
            None if self.iterations is None else self.iterations[:, idx],
            self.binding,
        )


def replication_weights(
    dist: WeightDistribution | str, n: int, m: int, seed: rng.Seed
) -> NDArray[np.float64]:
    """Weights of replications ``0..m-1``; row ``r`` depends only on ``(seed, r)``."""
    return np.stack([draw_weights(dist, n, rng.stream(seed, rng.WEIGHTS, r)) for r in range(m)])


def bootstrap_ensemble(
    dataset: ClusteredDataset,
    center: CoefficientProcess,
    m: int = DEFAULT_M,
    dist: WeightDistribution | str = WeightDistribution.MAMMEN,
    seed: rng.Seed = 0,
    warm_start: bool = True,
    threads: int = 1,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
    on_binding: str = "raise",
) -> BootstrapEnsemble:
    """Run ``m`` wild gradient bootstrap replications over ``center.grid``.

    Replication ``r`` uses weights from the substream keyed ``(seed, r)``,
    so the result is bit-identical for any ``threads``.

    With ``warm_start`` every solve starts at the center; a solve that
    fails from there is repeated from the default start.

    A draw whose pseudo-observation residual is not positive (up to
    ``BINDING_RTOL * y*``) is re-solved with ``2 y*``.  If it still binds, ``on_binding="raise"`` aborts and
    ``on_binding="accept"`` keeps the augmented solution at the original
    ``y*``; such draws are counted in ``binding``.  Binding that survives
    the doubling means the perturbed problem without the pseudo-observation
    is unbounded, so no larger ``y*`` would help.

    Raises
    ------
    SolverDidNotConverge, PseudoObservationBinding
        Tagged with the replication and quantile; no replication is dropped.
    """
    if on_binding not in ("raise", "accept"):
        raise InputError(f"on_binding must be 'raise' or 'accept', got {on_binding!r}")
    if m < 2:
        raise InsufficientDraws("an ensemble needs m >= 2 draws")
    dist = WeightDistribution.parse(dist)
    key = rng.as_key(seed)
    taus = np.ascontiguousarray(center.grid.taus)
    W = replication_weights(dist, dataset.n, m, key)
    scores = cluster_scores(dataset, center)
    # x* = -sqrt(n) W_n(tau) / tau = -(sum_i W_i S_i(tau)) / tau
    xstars = np.empty((m, len(taus), dataset.d))
    for g in range(len(taus)):
        xstars[:, g, :] = -(W @ scores[g]) / taus[g]
    ys = y_star(dataset)

    X, y = dataset.X, dataset.y
    centers = np.ascontiguousarray(center.betas)

    def run(lo: int, hi: int):
        return _fn.bootstrap_solves(X, y, taus, centers, xstars[lo:hi], ys, tol, max_iter, warm_start)

    bounds = np.linspace(0, m, max(1, min(threads, m)) + 1).astype(int)
    if len(bounds) > 2:
        with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
            parts = list(pool.map(run, bounds[:-1], bounds[1:]))
    else:
        parts = [run(0, m)]
    draws = np.concatenate([p[0] for p in parts])
    resid = np.concatenate([p[1] for p in parts])
    status = np.concatenate([p[2] for p in parts])
    iters = np.concatenate([p[3] for p in parts])

    bad = np.argwhere(status != _fn.OK)
    if bad.size:
        r, g = bad[0]
        raise SolverDidNotConverge(int(iters[r, g]), tau=float(taus[g]), replication=int(r))

    # x* = 0 makes the extra check loss a constant: the original fit is exact
    zero = ~np.any(xstars != 0.0, axis=2)
    draws[zero] = centers[np.nonzero(zero)[1]]
    resid[zero] = ys

    # a binding residual is zero up to rounding, so compare relative to y*
    retries = binding = 0
    for r, g in np.argwhere(resid <= BINDING_RTOL * ys):
        retries += 1
        xa = np.vstack([X, xstars[r, g][None, :]])
        ya = np.append(y, 2.0 * ys)
        beta = solve(xa, ya, taus[g], centers[g] if warm_start else None, tol, max_iter).beta
        if 2.0 * ys - xstars[r, g] @ beta <= BINDING_RTOL * 2.0 * ys:
            if on_binding == "raise":
                raise PseudoObservationBinding(float(taus[g]), replication=int(r))
            binding += 1
            continue
        draws[r, g] = beta

    return BootstrapEnsemble(center, draws, dataset.n, key, dist, ys, retries, iters, binding)


def write_ensemble(ensemble: BootstrapEnsemble, path: str | os.PathLike) -> None:
    """Columnar dump: ``replication,tau,coef,value``; replication -1 is the center."""
    G, d = ensemble.center.betas.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {ENSEMBLE_FORMAT}\n")
        fh.write(f"# n_clusters={ensemble.n_clusters}\n")
        fh.write(f"# seed={','.join(map(str, ensemble.seed))}\n")
        fh.write(f"# distribution={ensemble.distribution.value}\n")
        fh.write(f"# y_star={float(ensemble.y_star)!r}\n")
        fh.write("replication,tau,coef,value\n")
        taus = ensemble.grid.taus
        for g in range(G):
            for j in range(d):
                fh.write(f"-1,{float(taus[g])!r},{j},{float(ensemble.center.betas[g, j])!r}\n")
        for r in range(ensemble.m):
            for g in range(G):
                for j in range(d):
                    fh.write(f"{r},{float(taus[g])!r},{j},{float(ensemble.draws[r, g, j])!r}\n")


def read_ensemble(path: str | os.PathLike) -> BootstrapEnsemble:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# {ENSEMBLE_FORMAT}":
            raise InputError(f"{path}: not a {ENSEMBLE_FORMAT} file")
        line = fh.readline()
        while line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
            line = fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    rep = data[:, 0].astype(int)
    taus = np.unique(data[:, 1])
    d = int(data[:, 2].max()) + 1
    G = taus.shape[0]
    m = int(rep.max()) + 1
    center = data[rep == -1, 3].reshape(G, d)
    draws = data[rep >= 0, 3].reshape(m, G, d)
    return BootstrapEnsemble(
        CoefficientProcess(QuantileGrid(taus), center),
        draws,
        int(meta["n_clusters"]),
        tuple(int(s) for s in meta["seed"].split(",")),
        WeightDistribution.parse(meta["distribution"]),
        float(meta["y_star"]),
    )
