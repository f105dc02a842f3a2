"""Clustered regression data: loading, validation and the intraclass correlation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    EmptyDataset,
    InputError,
    MissingColumn,
    NonNumericCell,
    RankDeficientDesign,
)

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

INTERCEPT = "(intercept)"
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Cluster:
    label: object
    y: NDArray[np.float64]
    X: NDArray[np.float64]

    @property
    def size(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Observations grouped into independent clusters.

    Rows are stored contiguously by cluster.  Clusters are kept in sorted
    label order so that any permutation of the input clusters yields the
    same internal layout; the input order of rows within a cluster is
    preserved.  Arrays are read-only.

    Use :meth:`from_arrays` or :func:`load_csv` rather than the constructor.
    """

    y: NDArray[np.float64]
    X: NDArray[np.float64]
    labels: tuple
    offsets: NDArray[np.int64]
    columns: tuple[str, ...]
    response: str = "y"

    @classmethod
    def from_arrays(
        cls,
        y: ArrayLike,
        X: ArrayLike,
        cluster: ArrayLike,
        columns: Sequence[str] | None = None,
        response: str = "y",
        check_rank: bool = True,
    ) -> ClusteredDataset:
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        cluster = np.asarray(cluster)
        if y.ndim != 1 or X.ndim != 2 or cluster.ndim != 1:
            raise DimensionMismatch("expected y (N,), X (N, d) and cluster (N,)")
        N = y.shape[0]
        if N == 0:
            raise EmptyDataset("no observations")
        if X.shape[0] != N or cluster.shape[0] != N:
            raise DimensionMismatch(
                f"y has {N} rows, X has {X.shape[0]}, cluster has {cluster.shape[0]}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise InputError("y and X must be finite")
        d = X.shape[1]
        if columns is None:
            columns = tuple(f"x{j}" for j in range(d))
        columns = tuple(columns)
        if len(columns) != d:
            raise DimensionMismatch(f"{len(columns)} column names for {d} covariates")

        uniq, inverse = np.unique(cluster, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=uniq.shape[0])
        if uniq.shape[0] < 2:
            raise EmptyDataset("at least two clusters are required")
        offsets = np.zeros(uniq.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])

        y = np.ascontiguousarray(y[order])
        X = np.ascontiguousarray(X[order])
        if check_rank:
            _check_rank(X)
        for a in (y, X, offsets):
            a.setflags(write=False)
        labels = tuple(u.item() if hasattr(u, "item") else u for u in uniq)
        return cls(y=y, X=X, labels=labels, offsets=offsets, columns=columns, response=response)

    @property
    def n(self) -> int:
        """Number of clusters."""
        return len(self.labels)

    @property
    def N(self) -> int:
        """Total number of observations."""
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def sizes(self) -> NDArray[np.int64]:
        return np.diff(self.offsets)

    @property
    def cluster_index(self) -> NDArray[np.int64]:
        """Cluster position (0..n-1) of every row."""
        return np.repeat(np.arange(self.n), self.sizes)

    @property
    def clusters(self) -> Iterator[Cluster]:
        for i, label in enumerate(self.labels):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            yield Cluster(label, self.y[lo:hi], self.X[lo:hi])

    def cluster_sums(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Sum row-indexed values within each cluster (first axis)."""
        return np.add.reduceat(values, self.offsets[:-1], axis=0)

    def column_index(self, key: int | str) -> int:
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.d:
                raise MissingColumn(str(key))
            return int(key)
        if key in self.columns:
            return self.columns.index(key)
        raise MissingColumn(key)

    def __repr__(self) -> str:
        return f"ClusteredDataset(n={self.n}, N={self.N}, d={self.d}, columns={self.columns})"


def _check_rank(X: NDArray[np.float64]) -> None:
    d = X.shape[1]
    if X.shape[0] < d:
        raise RankDeficientDesign(f"{X.shape[0]} observations for {d} covariates")
    R = scipy.linalg.qr(X, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    if diag[0] == 0.0:
        raise RankDeficientDesign("design matrix is zero")
    rank = int(np.sum(diag > RANK_RTOL * diag[0]))
    if rank < d:
        raise RankDeficientDesign(f"design matrix has rank {rank} < {d}")


def _resolve(header: list[str] | None, key: int | str, ncols: int) -> tuple[int, str]:
    if header is not None:
        if isinstance(key, str) and key in header:
            return header.index(key), key
        if isinstance(key, str) and not key.isdigit():
            raise MissingColumn(key)
    idx = int(key)
    if not 0 <= idx < ncols:
        raise MissingColumn(str(key))
    name = header[idx] if header is not None else f"c{idx}"
    return idx, name


def _parse(value: str, row: int, col: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise NonNumericCell(row, col, value) from None
    if not np.isfinite(v):
        raise NonNumericCell(row, col, value)
    return v


def load_csv(
    path: str | os.PathLike,
    cluster_column: int | str,
    response_column: int | str,
    covariate_columns: Sequence[int | str],
    has_header: bool = True,
    add_intercept: bool = True,
) -> ClusteredDataset:
    """Read a clustered dataset from a comma-separated file.

    Columns may be given by header name or by zero-based position.  With
    ``add_intercept`` a constant column named ``(intercept)`` is prepended
    to the covariates.

    Raises
    ------
    MissingColumn, NonNumericCell, EmptyDataset, RankDeficientDesign
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = None
    first_line = 1
    if has_header:
        if not rows:
            raise EmptyDataset(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
        first_line = 2
    numbered = [(i, r) for i, r in enumerate(rows, start=first_line) if any(c.strip() for c in r)]
    if not numbered:
        raise EmptyDataset(f"{path}: no data rows")
    ncols = len(header) if header is not None else len(numbered[0][1])

    ci, _ = _resolve(header, cluster_column, ncols)
    yi, yname = _resolve(header, response_column, ncols)
    xcols = [_resolve(header, c, ncols) for c in covariate_columns]

    labels, ys, xs = [], [], []
    for lineno, row in numbered:
        if len(row) < ncols:
            raise NonNumericCell(lineno, "?", ",".join(row))
        labels.append(row[ci].strip())
        ys.append(_parse(row[yi], lineno, yname))
        xs.append([_parse(row[j], lineno, name) for j, name in xcols])

    X = np.array(xs, dtype=np.float64).reshape(len(ys), len(xcols))
    names = [name for _, name in xcols]
    if add_intercept:
        X = np.column_stack([np.ones(len(ys)), X])
        names = [INTERCEPT] + names
    if X.shape[1] == 0:
        raise EmptyDataset("no covariates")
    return ClusteredDataset.from_arrays(
        ys, X, np.array(labels, dtype=object).astype(str), columns=names, response=yname
    )


def write_csv(dataset: ClusteredDataset, path: str | os.PathLike) -> None:
    """Write ``dataset`` with a header row; reals use 17 significant digits.

    Reading the file back with ``add_intercept=False`` and all covariate
    columns reproduces the dataset exactly.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cluster", dataset.response, *dataset.columns])
        for i, cl in enumerate(dataset.clusters):
            for k in range(cl.size):
                wr.writerow(
                    [cl.label, format(cl.y[k], ".17g"), *(format(v, ".17g") for v in cl.X[k])]
                )


def intraclass_correlation(dataset: ClusteredDataset, variable: int | str | None = None) -> float:
    """Moment estimate of the within-cluster correlation of one variable.

    Pairs within a cluster are averaged over ``c_i - 1`` partners and
    compared against the total sum of squares about the pooled mean.

    Parameters
    ----------
    variable : None, int or str
        ``None`` (or the response name) selects the response; otherwise a
        covariate column name or index.
    """
    if variable is None or variable == dataset.response:
        v = dataset.y
    else:
        v = dataset.X[:, dataset.column_index(variable)]
    e = v - v.mean()
    den = float(np.dot(e, e))
    if den == 0.0:
        raise DegenerateVariance("variable is constant")
    sizes = dataset.sizes
    tot = dataset.cluster_sums(e)
    sq = dataset.cluster_sums(e * e)
    keep = sizes >= 2
    num = float(np.sum((tot[keep] ** 2 - sq[keep]) / (sizes[keep] - 1)))
    return num / den
