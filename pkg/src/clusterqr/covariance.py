"""Covariance functions of the coefficient process.

The bootstrap estimate is the sample covariance of the scaled bootstrap
deviations.  The analytical baselines are the clustered plug-in sandwich
(cluster score outer product between Powell kernel Jacobians) and the
classical sandwich that ignores clustering.

Scaling convention: ``J`` and ``Sigma`` are averages over clusters, so
``J^-1 Sigma J^-1 / n`` is the covariance of the estimator itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .errors import (
    DimensionMismatch,
    EmptyWindow,
    InputError,
    InsufficientDraws,
    NegativeVariance,
    SingularJacobian,
)
from .solver import CoefficientProcess, QuantileGrid, fitted_residuals, psi

if TYPE_CHECKING:
    import os

    from numpy.typing import NDArray

    from .bootstrap import BootstrapEnsemble
    from .dataset import ClusteredDataset

NEGATIVE_TOL = 1e-10
MAX_CONDITION = 1e12
IQR_NORMAL = 1.349
COVARIANCE_FORMAT = "clusterqr-covariance v1"


@dataclass(frozen=True, eq=False)
class CovarianceFunction:
    """``blocks[g, h]`` is the d x d covariance between grid points g and h."""

    grid: QuantileGrid
    blocks: NDArray[np.float64]
    n: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        G = len(self.grid)
        if self.blocks.ndim != 4 or self.blocks.shape[:2] != (G, G):
            raise DimensionMismatch(f"blocks shape {self.blocks.shape} does not match grid of {G}")

    @property
    def d(self) -> int:
        return self.blocks.shape[2]

    def block(self, tau: float, tau2: float) -> NDArray[np.float64]:
        return self.blocks[self.grid.index(tau), self.grid.index(tau2)]

    def diagonal(self) -> NDArray[np.float64]:
        """Variance blocks ``V(tau, tau)``, shape (G, d, d)."""
        G = len(self.grid)
        return self.blocks[np.arange(G), np.arange(G)]


def bootstrap_covariance(ensemble: BootstrapEnsemble, centering: str = "mean") -> CovarianceFunction:
    """Sample covariance of ``sqrt(n) (beta* - center)`` over replications.

    Parameters
    ----------
    centering : {"mean", "estimate"}
        Center the draws at their ensemble mean (default) or at the
        original estimate.  Both divide by ``m``.
    """
    m = ensemble.m
    if m < 2:
        raise InsufficientDraws("need at least two bootstrap draws")
    if centering == "mean":
        # shift by the first draw so that constant draws give exact zeros
        dev = ensemble.draws - ensemble.draws[0]
        dev -= dev.mean(axis=0)
    elif centering == "estimate":
        dev = ensemble.draws - ensemble.center.betas[None]
    else:
        raise InputError(f"unknown centering {centering!r}")
    n = ensemble.n_clusters
    G, d = dev.shape[1:]
    blocks = np.empty((G, G, d, d))
    for g in range(G):
        for h in range(g, G):
            blocks[g, h] = n * (dev[:, g, :].T @ dev[:, h, :]) / m
            if h != g:
                blocks[h, g] = blocks[g, h].T
        # exact symmetry of the diagonal blocks
        blocks[g, g] = 0.5 * (blocks[g, g] + blocks[g, g].T)
    return CovarianceFunction(ensemble.grid, blocks, n, {"centering": centering, "draws": m})


def standard_errors(cov: CovarianceFunction, n: int | None = None) -> NDArray[np.float64]:
    """Square roots of ``diag V(tau, tau) / n``, shape (G, d)."""
    n = cov.n if n is None else n
    var = np.diagonal(cov.diagonal(), axis1=1, axis2=2) / n
    if np.any(var < -NEGATIVE_TOL):
        raise NegativeVariance(f"negative variance {var.min():g}")
    return np.sqrt(np.clip(var, 0.0, None))


def pss_sigma(dataset: ClusteredDataset, center: CoefficientProcess, tau: float) -> NDArray[np.float64]:
    """Clustered score outer product ``(1/n) sum_i s_i s_i'`` at the estimate."""
    beta = center.at(tau)
    s = dataset.cluster_sums(psi(fitted_residuals(dataset.X, dataset.y, beta), tau)[:, None] * dataset.X)
    return s.T @ s / dataset.n


def hall_sheather_bandwidth(N: int, tau: float, alpha: float = 0.05) -> float:
    """Hall-Sheather bandwidth on the probability scale.

    ``N^(-1/3) z^(2/3) [1.5 phi(q)^2 / (2 q^2 + 1)]^(1/3)`` with
    ``q = Phi^-1(tau)`` and ``z = Phi^-1(1 - alpha/2)``.
    """
    if not 0.0 < tau < 1.0 or not 0.0 < alpha < 1.0:
        raise InputError("tau and alpha must lie in (0, 1)")
    q = ndtri(tau)
    z = ndtri(1.0 - alpha / 2.0)
    ratio = 1.5 * norm.pdf(q) ** 2 / (2.0 * q * q + 1.0)
    return float(N ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * ratio ** (1.0 / 3.0))


def residual_scale(res: NDArray[np.float64], rule: str = "koenker") -> float:
    """Robust residual scale: ``min(sd, IQR/1.349)`` or the raw median absolute deviation."""
    if rule == "koenker":
        q75, q25 = np.percentile(res, [75.0, 25.0])
        return float(min(np.std(res, ddof=1), (q75 - q25) / IQR_NORMAL))
    if rule == "mad":
        return float(np.median(np.abs(res - np.median(res))))
    raise InputError(f"unknown scale rule {rule!r}")


def kernel_width(
    res: NDArray[np.float64],
    tau: float,
    h: float,
    scale: str | None = "koenker",
    quantile_transform: bool = True,
) -> float:
    """Convert a probability-scale bandwidth into residual units.

    With a scale rule and ``quantile_transform`` the width is
    ``kappa * (Phi^-1(tau + h) - Phi^-1(tau - h))``, ``h`` first shrunk so
    that ``tau +- h`` stays inside (0, 1).  Without the transform it is
    ``kappa * h``.  With ``scale=None`` the bandwidth is used as is.
    """
    if scale is None:
        return float(h)
    kappa = residual_scale(res, scale)
    if not quantile_transform:
        return kappa * float(h)
    h = min(h, 0.999 * min(tau, 1.0 - tau))
    return kappa * float(ndtri(tau + h) - ndtri(tau - h))


def powell_jacobian(
    dataset: ClusteredDataset,
    center: CoefficientProcess,
    tau: float,
    h: float,
    kernel: str = "uniform",
    scale: str | None = "koenker",
    quantile_transform: bool = True,
) -> NDArray[np.float64]:
    """Powell kernel estimate of the density-weighted design moment.

    ``(1 / (2 w n)) sum 1{|r| <= w} x x'`` for the uniform kernel, where
    ``w = kernel_width(residuals, tau, h, scale)``; ``kernel="gaussian"``
    uses ``phi(r / w) / w`` weights instead.

    Raises
    ------
    EmptyWindow
        If no residual falls inside the uniform window.
    """
    if not h > 0.0:
        raise InputError("bandwidth must be positive")
    res = dataset.y - dataset.X @ center.at(tau)
    width = kernel_width(res, tau, h, scale, quantile_transform)
    if not width > 0.0:
        raise EmptyWindow(f"kernel width {width:g} at tau={tau:g}")
    if kernel == "uniform":
        wts = (np.abs(res) <= width) / (2.0 * width)
        if not np.any(wts):
            raise EmptyWindow(f"no residual within +-{width:g} at tau={tau:g}")
    elif kernel == "gaussian":
        wts = norm.pdf(res / width) / width
    else:
        raise InputError(f"unknown kernel {kernel!r}")
    return (dataset.X * wts[:, None]).T @ dataset.X / dataset.n


def analytical_covariance(
    dataset: ClusteredDataset,
    center: CoefficientProcess,
    tau: float,
    clustered: bool = True,
    alpha: float = 0.05,
    kernel: str = "uniform",
    scale: str | None = "koenker",
    quantile_transform: bool = True,
) -> NDArray[np.float64]:
    """Sandwich ``J^-1 Sigma J^-1`` with a Powell/Hall-Sheather Jacobian.

    ``clustered=False`` replaces the cluster score outer product with
    ``tau (1 - tau) / n * sum x x'``.
    """
    h = hall_sheather_bandwidth(dataset.N, tau, alpha)
    J = powell_jacobian(dataset, center, tau, h, kernel, scale, quantile_transform)
    if np.linalg.cond(J) > MAX_CONDITION:
        raise SingularJacobian(f"Powell Jacobian is singular at tau={tau:g}")
    if clustered:
        sigma = pss_sigma(dataset, center, tau)
    else:
        sigma = tau * (1.0 - tau) * (dataset.X.T @ dataset.X) / dataset.n
    Jinv = np.linalg.inv(J)
    V = Jinv @ sigma @ Jinv.T
    return 0.5 * (V + V.T)


def analytical_covariance_function(
    dataset: ClusteredDataset, center: CoefficientProcess, clustered: bool = True, **kwargs
) -> CovarianceFunction:
    """Diagonal-only covariance function from :func:`analytical_covariance`.

    Off-diagonal (cross-quantile) blocks are not estimated and are NaN.
    """
    G, d = center.betas.shape
    blocks = np.full((G, G, d, d), np.nan)
    for g, tau in enumerate(center.grid.taus):
        blocks[g, g] = analytical_covariance(dataset, center, tau, clustered=clustered, **kwargs)
    meta = {"kind": "analytical", "clustered": clustered, "bandwidth": "hall-sheather"}
    meta.update({k: v for k, v in kwargs.items() if isinstance(v, (str, float, int))})
    return CovarianceFunction(center.grid, blocks, dataset.n, meta)


def write_covariance(cov: CovarianceFunction, path: str | os.PathLike) -> None:
    """Columnar dump ``tau,tau2,row,col,value`` with a JSON metadata header line."""
    taus = cov.grid.taus
    G, d = len(taus), cov.d
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {COVARIANCE_FORMAT}\n")
        fh.write(f"# {json.dumps({'n': cov.n, **cov.meta}, sort_keys=True)}\n")
        fh.write("tau,tau2,row,col,value\n")
        for g in range(G):
            for h in range(G):
                for a in range(d):
                    for b in range(d):
                        fh.write(f"{float(taus[g])!r},{float(taus[h])!r},{a},{b},{float(cov.blocks[g, h, a, b])!r}\n")


def read_covariance(path: str | os.PathLike) -> CovarianceFunction:
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != f"# {COVARIANCE_FORMAT}":
            raise InputError(f"{path}: not a {COVARIANCE_FORMAT} file")
        meta = json.loads(fh.readline()[1:])
        fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    taus = np.unique(data[:, 0])
    G = taus.shape[0]
    d = int(data[:, 2].max()) + 1
    n = meta.pop("n")
    return CovarianceFunction(QuantileGrid(taus), data[:, 4].reshape(G, G, d, d), n, meta)
