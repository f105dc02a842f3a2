"""Quantile regression on clustered data.

All fits go through the compiled Frisch-Newton kernel in :mod:`._fn`.
Quantile regression solutions can be set-valued; the interior-point
iteration returns a point close to the centre of the optimal face, so
callers comparing fits should compare objective values, not coefficients,
whenever ties are possible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from . import _fn
from .errors import (
    DimensionMismatch,
    InputError,
    PseudoObservationBinding,
    RankDeficientDesign,
    SolverDidNotConverge,
)

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from .dataset import ClusteredDataset

log = logging.getLogger(__name__)

GAP_TOL = 1e-9
MAX_ITER = 200
# pseudo-observation residuals at or below this fraction of y* count as binding
BINDING_RTOL = 1e-9
# fitted residuals at or below this fraction of the median |residual| are zero
ZERO_RTOL = 1e-5
_EMPTY = np.empty(0)


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """Strictly increasing quantile indices in (0, 1)."""

    taus: NDArray[np.float64]

    def __init__(self, taus: ArrayLike):
        t = np.array(taus, dtype=np.float64).reshape(-1)
        if t.size == 0:
            raise InputError("quantile grid is empty")
        if not (np.all(t > 0.0) and np.all(t < 1.0)):
            raise InputError(f"quantile indices must lie in (0, 1): {t}")
        if np.any(np.diff(t) <= 0.0):
            raise InputError("quantile indices must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "taus", t)

    def __len__(self) -> int:
        return self.taus.shape[0]

    def __iter__(self):
        return iter(self.taus.tolist())

    def __eq__(self, other) -> bool:
        return isinstance(other, QuantileGrid) and np.array_equal(self.taus, other.taus)

    def __hash__(self) -> int:
        return hash(self.taus.tobytes())

    def index(self, tau: float) -> int:
        hit = np.flatnonzero(np.isclose(self.taus, tau, rtol=0.0, atol=1e-12))
        if hit.size == 0:
            raise InputError(f"tau={tau:g} is not on the grid {self.taus.tolist()}")
        return int(hit[0])

    def subset(self, taus: Iterable[float]) -> QuantileGrid:
        return QuantileGrid([self.taus[self.index(t)] for t in taus])

    def __repr__(self) -> str:
        return f"QuantileGrid({self.taus.tolist()})"


@dataclass(frozen=True, eq=False)
class CoefficientProcess:
    """Coefficient vectors indexed by a quantile grid; ``betas`` is (G, d)."""

    grid: QuantileGrid
    betas: NDArray[np.float64]

    def __post_init__(self):
        b = np.array(self.betas, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != len(self.grid):
            raise DimensionMismatch(f"betas shape {b.shape} does not match grid of {len(self.grid)}")
        if not np.all(np.isfinite(b)):
            raise InputError("coefficient process has non-finite entries")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def d(self) -> int:
        return self.betas.shape[1]

    def at(self, tau: float) -> NDArray[np.float64]:
        return self.betas[self.grid.index(tau)]

    def restrict(self, grid: QuantileGrid) -> CoefficientProcess:
        idx = [self.grid.index(t) for t in grid.taus]
        return CoefficientProcess(grid, self.betas[idx])


@dataclass(frozen=True)
class PseudoObservation:
    y_star: float
    x_star: NDArray[np.float64]

    def __post_init__(self):
        if not self.y_star > 0.0:
            raise InputError(f"y_star must be positive, got {self.y_star}")
        object.__setattr__(self, "x_star", np.asarray(self.x_star, dtype=np.float64))


@dataclass(frozen=True)
class Solution:
    """Raw solver output for one quantile."""

    beta: NDArray[np.float64]
    dual: NDArray[np.float64]
    gap: float
    iterations: int


def check_loss(z: ArrayLike, tau: float) -> NDArray[np.float64]:
    """``rho_tau(z) = (tau - 1{z < 0}) z`` elementwise."""
    z = np.asarray(z, dtype=np.float64)
    return (tau - (z < 0.0)) * z


def psi(z: ArrayLike, tau: float) -> NDArray[np.float64]:
    """Quantile score ``tau - 1{z < 0}``; zero residuals count as not below."""
    return tau - (np.asarray(z) < 0.0)


def fitted_residuals(X: ArrayLike, y: ArrayLike, beta: ArrayLike) -> NDArray[np.float64]:
    """Residuals ``y - X beta`` with the interpolated ones set to exactly zero.

    An interior-point solution leaves the residuals of interpolated
    observations at rounding level with an arbitrary sign, which would flip
    their score between ``tau`` and ``tau - 1``.  Residuals within
    ``ZERO_RTOL`` times the median absolute residual count as zero.
    """
    r = np.asarray(y, dtype=np.float64) - np.asarray(X, dtype=np.float64) @ np.asarray(beta, dtype=np.float64)
    a = np.abs(r)
    scale = float(np.median(a)) if a.size else 0.0
    if scale == 0.0 and a.size:
        scale = float(np.mean(a))
    r[a <= ZERO_RTOL * scale] = 0.0
    return r


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise InputError(f"tau must lie in (0, 1), got {tau}")
    return tau


def objective(dataset: ClusteredDataset, beta: ArrayLike, tau: float) -> float:
    """Check-function objective averaged over clusters (not observations)."""
    tau = _check_tau(tau)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (dataset.d,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, expected ({dataset.d},)")
    return float(np.sum(check_loss(dataset.y - dataset.X @ beta, tau)) / dataset.n)


def solve(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    tau: float,
    start: ArrayLike | None = None,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
) -> Solution:
    """Minimize ``sum rho_tau(y - X b)`` for a plain design matrix."""
    tau = _check_tau(tau)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    b0 = _EMPTY if start is None else np.ascontiguousarray(start, dtype=np.float64)
    beta, dual, gap, it, status = _fn.rq_fnb(X, y, tau, b0, tol, max_iter)
    if status != _fn.OK and b0.size:
        # a warm start can stall; retry from the default starting point
        beta, dual, gap, it2, status = _fn.rq_fnb(X, y, tau, _EMPTY, tol, max_iter)
        it += it2
    if status == _fn.BREAKDOWN and it == 0:
        raise RankDeficientDesign("normal equations are singular")
    if status != _fn.OK:
        raise SolverDidNotConverge(it, tau=tau)
    return Solution(beta, dual, float(gap), int(it))


def fit(
    dataset: ClusteredDataset,
    tau: float,
    start: ArrayLike | None = None,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
) -> NDArray[np.float64]:
    """Quantile regression coefficients at a single ``tau``.

    The duality gap on return is at most ``tol * (1 + |sum of check losses|)``.
    """
    return solve(dataset.X, dataset.y, tau, start, tol, max_iter).beta


def fit_process(
    dataset: ClusteredDataset,
    grid: QuantileGrid,
    warm_start: bool = True,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
) -> CoefficientProcess:
    """Fit every grid point; with ``warm_start`` each solve starts at the previous one."""
    betas = np.empty((len(grid), dataset.d))
    prev = None
    for g, tau in enumerate(grid.taus):
        try:
            betas[g] = fit(dataset, tau, prev if warm_start else None, tol, max_iter)
        except SolverDidNotConverge as exc:
            raise SolverDidNotConverge(exc.iterations, tau=float(tau)) from exc
        prev = betas[g]
    return CoefficientProcess(grid, betas)


def fit_augmented(
    dataset: ClusteredDataset,
    pseudo: PseudoObservation,
    tau: float,
    start: ArrayLike | None = None,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
) -> NDArray[np.float64]:
    """Fit with one extra observation ``(y*, x*)`` appended to the data.

    The extra term is linear in ``beta`` only while the pseudo-observation's
    residual stays positive.  That is verified after the solve; on failure
    ``y*`` is doubled once and the fit repeated.

    Raises
    ------
    PseudoObservationBinding
        If the residual is still not positive after the retry.
    """
    x_star = np.asarray(pseudo.x_star, dtype=np.float64)
    if x_star.shape != (dataset.d,):
        raise DimensionMismatch(f"x_star has shape {x_star.shape}, expected ({dataset.d},)")
    X = np.vstack([dataset.X, x_star[None, :]])
    y_star = pseudo.y_star
    for attempt in range(2):
        y = np.append(dataset.y, y_star)
        beta = solve(X, y, tau, start, tol, max_iter).beta
        if y_star - x_star @ beta > BINDING_RTOL * y_star:
            return beta
        log.warning("pseudo-observation binding at tau=%g; doubling y*", tau)
        y_star *= 2.0
    raise PseudoObservationBinding(tau)
