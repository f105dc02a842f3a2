"""Uniform and pointwise inference on the coefficient process.

Kolmogorov-Smirnov tests compare a sup-norm statistic of the restriction
discrepancy with the same functional of the bootstrap deviations.  The
weight matrix, if estimated, is computed once and held fixed across
replications.  Pointwise Wald tests use chi-square critical values, and
confidence bands invert a studentized sup statistic over the grid and a
set of coefficients.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.stats import chi2, norm

from .covariance import (
    NEGATIVE_TOL,
    CovarianceFunction,
    analytical_covariance,
    bootstrap_covariance,
)
from .errors import DimensionMismatch, InputError, NearSingularWeight, NegativeVariance
from .solver import CoefficientProcess, QuantileGrid

if TYPE_CHECKING:
    import os

    from numpy.typing import ArrayLike, NDArray

    from .bootstrap import BootstrapEnsemble
    from .dataset import ClusteredDataset

EIG_RTOL = 1e-10
SYM_TOL = 1e-10
GRID_TOL = 1e-12
QUANTILE_CONVENTION = "ceil((1-alpha)*m)-th ascending order statistic"
P_VALUE_CONVENTION = "(1 + #{K* >= K}) / (m + 1)"
NORMS = ("euclidean", "max")


class WeightKind(str, enum.Enum):
    BOOTSTRAP_WALD = "wald"
    ANALYTICAL = "analytical"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value: str | WeightKind) -> WeightKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InputError(f"unknown weight kind {value!r}") from None


class LambdaKind(str, enum.Enum):
    BOOTSTRAP_VARIANCE = "variance"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value: str | LambdaKind) -> LambdaKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InputError(f"unknown band weight {value!r}") from None


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """``H0: R(tau) beta(tau) = r(tau)`` at every grid point.

    ``R`` has shape (G, h, d) and ``r`` has shape (G, h).
    """

    grid: QuantileGrid
    R: NDArray[np.float64]
    r: NDArray[np.float64]

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        r = np.array(self.r, dtype=np.float64)
        G = len(self.grid)
        if R.ndim != 3 or R.shape[0] != G:
            raise DimensionMismatch(f"R must have shape (G, h, d) with G={G}, got {R.shape}")
        if r.shape != R.shape[:2]:
            raise DimensionMismatch(f"r must have shape {R.shape[:2]}, got {r.shape}")
        if R.shape[1] > R.shape[2]:
            raise InputError(f"{R.shape[1]} restrictions on {R.shape[2]} coefficients")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(r))):
            raise InputError("restrictions must be finite")
        for g in range(G):
            if np.linalg.matrix_rank(R[g]) < R.shape[1]:
                raise InputError(f"R(tau={self.grid.taus[g]:g}) does not have full row rank")
        for a in (R, r):
            a.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "r", r)

    @property
    def h(self) -> int:
        return self.R.shape[1]

    @property
    def d(self) -> int:
        return self.R.shape[2]

    @classmethod
    def constant(cls, grid: QuantileGrid, R: ArrayLike, r: ArrayLike) -> Hypothesis:
        """The same ``(R, r)`` at every grid point."""
        R = np.atleast_2d(np.asarray(R, dtype=np.float64))
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        G = len(grid)
        return cls(grid, np.broadcast_to(R, (G,) + R.shape), np.broadcast_to(r, (G,) + r.shape))

    @classmethod
    def coefficient(cls, grid: QuantileGrid, d: int, j: int, value: ArrayLike = 0.0) -> Hypothesis:
        """``beta_j(tau) = value`` for every tau; ``value`` may vary over the grid."""
        if not 0 <= j < d:
            raise InputError(f"coefficient index {j} out of range for d={d}")
        G = len(grid)
        R = np.zeros((G, 1, d))
        R[:, 0, j] = 1.0
        r = np.broadcast_to(np.asarray(value, dtype=np.float64), (G,)).reshape(G, 1)
        return cls(grid, R, r)

    def restrict(self, grid: QuantileGrid) -> Hypothesis:
        idx = [self.grid.index(t) for t in grid.taus]
        return Hypothesis(grid, self.R[idx], self.r[idx])


@dataclass(frozen=True, eq=False)
class TestResult:
    statistic: float
    critical_value: float
    p_value: float
    reject: bool
    bootstrap_stats: NDArray[np.float64]
    weight_kind: str
    alpha: float
    details: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self, include_stats: bool = True) -> dict:
        out = {
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "p_value": self.p_value,
            "reject": self.reject,
            "alpha": self.alpha,
            "weight_kind": self.weight_kind,
            **self.details,
        }
        if include_stats:
            out["bootstrap_stats"] = self.bootstrap_stats.tolist()
        return out

    def to_json(self, include_stats: bool = True) -> str:
        return json.dumps(self.to_dict(include_stats), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class ConfidenceBand:
    """Joint band over the grid for the coefficients in ``delta``; arrays are (G, |delta|)."""

    grid: QuantileGrid
    delta: tuple[int, ...]
    q: float
    center: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    lambda_kind: LambdaKind
    alpha: float

    def contains(self, beta: ArrayLike) -> bool:
        """Whether a (G, d) coefficient process lies inside the band everywhere."""
        b = np.asarray(beta, dtype=np.float64)[:, list(self.delta)]
        return bool(np.all((self.lower <= b) & (b <= self.upper)))

    def write_csv(self, path: str | os.PathLike, names: Sequence[str] | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["tau", "coef", "lower", "center", "upper"])
            for g, tau in enumerate(self.grid.taus):
                for k, j in enumerate(self.delta):
                    wr.writerow(
                        [
                            repr(float(tau)),
                            names[j] if names is not None else j,
                            repr(float(self.lower[g, k])),
                            repr(float(self.center[g, k])),
                            repr(float(self.upper[g, k])),
                        ]
                    )


def inv_sqrt_psd(A: ArrayLike, tau: float | None = None) -> NDArray[np.float64]:
    """Symmetric inverse square root through an eigendecomposition.

    Raises
    ------
    NearSingularWeight
        If an eigenvalue is below ``1e-10`` times the largest one.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"weight matrix must be square, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NearSingularWeight(tau, "weight matrix has non-finite entries")
    if np.max(np.abs(A - A.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(A))):
        raise InputError("weight matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    top = w[-1]
    if not top > 0.0 or w[0] < EIG_RTOL * top:
        raise NearSingularWeight(tau, f"eigenvalues in [{w[0]:.3g}, {top:.3g}]")
    B = (V / np.sqrt(w)) @ V.T
    return 0.5 * (B + B.T)


def _whiteners(weight: NDArray[np.float64], grid: QuantileGrid) -> NDArray[np.float64]:
    return np.stack([inv_sqrt_psd(weight[g], float(t)) for g, t in enumerate(grid.taus)])


def _norm(z: NDArray[np.float64], kind: str) -> NDArray[np.float64]:
    if kind == "euclidean":
        return np.sqrt(np.sum(z * z, axis=-1))
    if kind == "max":
        return np.max(np.abs(z), axis=-1)
    raise InputError(f"unknown norm {kind!r}; choose from {NORMS}")


def _check_aligned(center: CoefficientProcess, hyp: Hypothesis) -> None:
    if center.grid != hyp.grid:
        raise DimensionMismatch("hypothesis and coefficient process use different grids")
    if center.d != hyp.d:
        raise DimensionMismatch(f"hypothesis has d={hyp.d}, coefficients have d={center.d}")


def wald_weight(cov: CovarianceFunction, hyp: Hypothesis) -> NDArray[np.float64]:
    """``R(tau) V(tau, tau) R(tau)'`` per grid point, shape (G, h, h)."""
    V = cov.diagonal()
    if cov.grid != hyp.grid:
        V = V[[cov.grid.index(t) for t in hyp.grid.taus]]
    return np.einsum("gad,gde,gbe->gab", hyp.R, V, hyp.R)


def identity_weight(hyp: Hypothesis) -> NDArray[np.float64]:
    return np.broadcast_to(np.eye(hyp.h), (len(hyp.grid), hyp.h, hyp.h)).copy()


def analytical_weight(
    dataset: ClusteredDataset, center: CoefficientProcess, hyp: Hypothesis, clustered: bool = True
) -> NDArray[np.float64]:
    """Wald weight from the analytical sandwich instead of the bootstrap covariance."""
    V = np.stack([analytical_covariance(dataset, center, t, clustered=clustered) for t in hyp.grid.taus])
    return np.einsum("gad,gde,gbe->gab", hyp.R, V, hyp.R)


def restriction_norms(
    center: CoefficientProcess,
    hyp: Hypothesis,
    weight: NDArray[np.float64],
    n: int,
    norm_kind: str = "euclidean",
) -> NDArray[np.float64]:
    """``|Omega^{-1/2}(tau) sqrt(n) (R beta - r)|`` at every grid point."""
    _check_aligned(center, hyp)
    B = _whiteners(np.asarray(weight, dtype=np.float64), hyp.grid)
    dev = math.sqrt(n) * (np.einsum("gad,gd->ga", hyp.R, center.betas) - hyp.r)
    return _norm(np.einsum("gab,gb->ga", B, dev), norm_kind)


def ks_statistic(
    center: CoefficientProcess,
    hyp: Hypothesis,
    weight: NDArray[np.float64],
    n: int,
    norm_kind: str = "euclidean",
) -> tuple[float, float, int]:
    """Sup over the grid of the weighted restriction discrepancy.

    Returns
    -------
    (value, tau, index)
        The statistic and the (first) grid point attaining it.
    """
    vals = restriction_norms(center, hyp, weight, n, norm_kind)
    g = int(np.argmax(vals))
    return float(vals[g]), float(hyp.grid.taus[g]), g


def bootstrap_ks(
    ensemble: BootstrapEnsemble,
    hyp: Hypothesis,
    weight: NDArray[np.float64],
    norm_kind: str = "euclidean",
) -> NDArray[np.float64]:
    """Bootstrap sup statistics, one per replication; ``r`` does not enter."""
    _check_aligned(ensemble.center, hyp)
    B = _whiteners(np.asarray(weight, dtype=np.float64), hyp.grid)
    dev = math.sqrt(ensemble.n_clusters) * np.einsum(
        "gad,rgd->rga", hyp.R, ensemble.draws - ensemble.center.betas[None]
    )
    return _norm(np.einsum("gab,rgb->rga", B, dev), norm_kind).max(axis=1)


def critical_value(stats: ArrayLike, alpha: float) -> float:
    """The ``ceil((1 - alpha) m)``-th smallest statistic.

    ``alpha >= 1`` gives ``-inf`` so that every statistic rejects.
    """
    s = np.sort(np.asarray(stats, dtype=np.float64).reshape(-1))
    m = s.shape[0]
    if m < 1:
        raise InputError("no bootstrap statistics")
    if not alpha > 0.0:
        raise InputError("alpha must be positive")
    if alpha >= 1.0:
        return -math.inf
    # the small slack keeps e.g. 0.95 * 299 from rounding up past an integer
    k = max(1, math.ceil((1.0 - alpha) * m - 1e-9))
    return float(s[k - 1])


def bootstrap_p_value(statistic: float, stats: ArrayLike) -> float:
    s = np.asarray(stats, dtype=np.float64)
    return float((1 + np.count_nonzero(s >= statistic)) / (s.shape[0] + 1))


def test(
    dataset: ClusteredDataset,
    center: CoefficientProcess,
    ensemble: BootstrapEnsemble,
    hyp: Hypothesis,
    weight_kind: WeightKind | str = WeightKind.BOOTSTRAP_WALD,
    alpha: float = 0.05,
    norm_kind: str = "euclidean",
    cov: CovarianceFunction | None = None,
) -> TestResult:
    """Bootstrap Kolmogorov-Smirnov test of ``hyp`` over its grid.

    ``ensemble`` and ``center`` are restricted to the hypothesis grid if they
    are defined on a larger one.  For the Wald weight, ``cov`` may be passed
    to reuse an existing bootstrap covariance.
    """
    kind = WeightKind.parse(weight_kind)
    if center.grid != hyp.grid:
        center = center.restrict(hyp.grid)
    if ensemble.grid != hyp.grid:
        ensemble = ensemble.restrict(hyp.grid)
    if kind is WeightKind.BOOTSTRAP_WALD:
        weight = wald_weight(cov if cov is not None else bootstrap_covariance(ensemble), hyp)
    elif kind is WeightKind.ANALYTICAL:
        weight = analytical_weight(dataset, center, hyp)
    else:
        weight = identity_weight(hyp)
    vals = restriction_norms(center, hyp, weight, dataset.n, norm_kind)
    g = int(np.argmax(vals))
    stat = float(vals[g])
    boot = bootstrap_ks(ensemble, hyp, weight, norm_kind)
    q = critical_value(boot, alpha)
    details = {
        "argmax_tau": float(hyp.grid.taus[g]),
        "norm": norm_kind,
        "m": ensemble.m,
        "quantile_convention": QUANTILE_CONVENTION,
        "p_value_convention": P_VALUE_CONVENTION,
        "per_tau": [{"tau": float(t), "value": float(v)} for t, v in zip(hyp.grid.taus, vals)],
    }
    return TestResult(stat, q, bootstrap_p_value(stat, boot), stat > q, boot, kind.value, alpha, details)


def pointwise_wald(
    center: CoefficientProcess,
    cov: CovarianceFunction,
    hyp: Hypothesis,
    tau: float,
    alpha: float = 0.05,
    n: int | None = None,
) -> TestResult:
    """Chi-square Wald test of ``hyp`` at a single grid point.

    The statistic is ``n (R b - r)' (R V R')^-1 (R b - r)`` with ``rank(R)``
    degrees of freedom.  For a single restriction the studentized form
    ``(R b - r) / se`` is reported in ``details``.
    """
    n = cov.n if n is None else n
    g = hyp.grid.index(tau)
    R, r = hyp.R[g], hyp.r[g]
    V = cov.block(tau, tau)
    omega = R @ V @ R.T
    B = inv_sqrt_psd(omega, tau)
    dev = R @ center.at(tau) - r
    z = B @ (math.sqrt(n) * dev)
    stat = float(z @ z)
    df = int(np.linalg.matrix_rank(R))
    if alpha >= 1.0:
        cv = 0.0
    else:
        cv = float(chi2.ppf(1.0 - alpha, df))
    details = {"tau": float(tau), "df": df, "distribution": "chi2"}
    if hyp.h == 1:
        se = math.sqrt(omega[0, 0] / n)
        details["t_statistic"] = float(dev[0] / se)
        details["standard_error"] = se
        details["normal_critical_value"] = float(norm.ppf(1.0 - alpha / 2.0)) if alpha < 1.0 else 0.0
    return TestResult(
        stat, cv, float(chi2.sf(stat, df)), stat > cv, np.empty(0), WeightKind.BOOTSTRAP_WALD.value, alpha, details
    )


def band_scales(
    ensemble: BootstrapEnsemble,
    delta: Sequence[int],
    lambda_kind: LambdaKind | str = LambdaKind.BOOTSTRAP_VARIANCE,
    lam: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """``sqrt(Lambda_jj(tau) / n)`` for ``j`` in ``delta``, shape (G, |delta|).

    ``lam`` overrides the diagonal of Lambda (shape (G, |delta|)).
    """
    kind = LambdaKind.parse(lambda_kind)
    G = len(ensemble.grid)
    if lam is not None:
        diag = np.asarray(lam, dtype=np.float64).reshape(G, len(delta))
    elif kind is LambdaKind.BOOTSTRAP_VARIANCE:
        V = bootstrap_covariance(ensemble).diagonal()
        diag = np.diagonal(V, axis1=1, axis2=2)[:, list(delta)]
    else:
        diag = np.ones((G, len(delta)))
    if np.any(diag < -NEGATIVE_TOL):
        raise NegativeVariance(f"negative band variance {diag.min():g}")
    return np.sqrt(np.clip(diag, 0.0, None) / ensemble.n_clusters)


def confidence_bands(
    ensemble: BootstrapEnsemble,
    delta: Sequence[int] | None = None,
    lambda_kind: LambdaKind | str = LambdaKind.BOOTSTRAP_VARIANCE,
    alpha: float = 0.05,
    lam: ArrayLike | None = None,
    q_override: float | None = None,
) -> ConfidenceBand:
    """Joint ``1 - alpha`` band ``beta_j(tau) +- q sqrt(Lambda_jj(tau) / n)``.

    ``q`` is the bootstrap critical value of
    ``sup_tau max_j |beta*_j - beta_j| / sqrt(Lambda_jj / n)``.  A zero scale
    counts a zero deviation as 0 and any other deviation as infinite.
    ``q_override`` replaces the bootstrap critical value (testing hook).
    """
    d = ensemble.center.d
    delta = tuple(range(d)) if delta is None else tuple(int(j) for j in delta)
    if not delta:
        raise InputError("coefficient set is empty")
    if len(set(delta)) != len(delta) or not all(0 <= j < d for j in delta):
        raise InputError(f"invalid coefficient set {delta} for d={d}")
    kind = LambdaKind.parse(lambda_kind)
    s = band_scales(ensemble, delta, kind, lam)
    center = ensemble.center.betas[:, list(delta)]
    dev = np.abs(ensemble.draws[:, :, list(delta)] - center[None])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0.0, dev / s, np.where(dev > 0.0, np.inf, 0.0))
    stats = ratio.reshape(ensemble.m, -1).max(axis=1)
    q = critical_value(stats, alpha) if q_override is None else float(q_override)
    q = max(q, 0.0)
    with np.errstate(invalid="ignore"):
        half = np.where(s > 0.0, q * s, 0.0)
    return ConfidenceBand(
        ensemble.grid, delta, q, center.copy(), center - half, center + half, kind, alpha
    )


def default_grid(t_lo: float, t_hi: float, n: int) -> QuantileGrid:
    """``{j/n : j = 0..n}`` intersected with ``[t_lo, t_hi]``, or the midpoint if empty."""
    if not 0.0 < t_lo < t_hi < 1.0:
        raise InputError(f"need 0 < t_lo < t_hi < 1, got ({t_lo}, {t_hi})")
    if n < 1:
        raise InputError("grid resolution must be positive")
    pts = np.arange(n + 1) / n
    keep = (pts >= t_lo - GRID_TOL) & (pts <= t_hi + GRID_TOL) & (pts > 0.0) & (pts < 1.0)
    if not np.any(keep):
        return QuantileGrid([(t_lo + t_hi) / 2.0])
    return QuantileGrid(pts[keep])
