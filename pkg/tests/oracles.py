"""Independent reference implementations used as test oracles.

Everything here is written as directly as possible from the defining
formulas (plain loops, exhaustive enumeration) and shares no code with
the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def check_sum(X, y, beta, tau):
    """Sum of check losses, scalar loop."""
    total = 0.0
    for i in range(len(y)):
        r = y[i] - sum(X[i][j] * beta[j] for j in range(len(beta)))
        total += (tau - (1.0 if r < 0 else 0.0)) * r
    return total


def brute_force_rq(X, y, tau):
    """Optimal check-loss sum by enumerating every exact-fit basis.

    A linear program attains its optimum at a vertex; for quantile
    regression the vertices are the fits interpolating ``d`` observations.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N, d = X.shape
    best = math.inf
    for rows in itertools.combinations(range(N), d):
        A = X[list(rows)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        beta = np.linalg.solve(A, y[list(rows)])
        best = min(best, check_sum(X, y, beta, tau))
    return best


def random_instance(rng, n_max=12, d_max=3):
    N = int(rng.integers(4, n_max + 1))
    d = int(rng.integers(1, d_max + 1))
    X = np.column_stack([np.ones(N), rng.normal(size=(N, d - 1))])
    y = rng.normal(size=N) * rng.uniform(0.1, 10.0)
    tau = float(rng.uniform(0.05, 0.95))
    cluster = rng.integers(0, max(2, N // 3), size=N)
    cluster[:2] = [0, 1]
    return X, y, tau, cluster


def icc_by_definition(groups):
    """Intraclass correlation from the pairwise double sum, groups = list of lists."""
    flat = [v for g in groups for v in g]
    ybar = sum(flat) / len(flat)
    num = 0.0
    for g in groups:
        c = len(g)
        for k in range(c):
            for l in range(c):
                if l != k:
                    num += (g[k] - ybar) * (g[l] - ybar) / (c - 1)
    den = sum((v - ybar) ** 2 for v in flat)
    return num / den


def pss_by_definition(groups_X, groups_r, tau):
    """Clustered score outer product from the triple sum over (i, k, l)."""
    d = len(groups_X[0][0])
    S = np.zeros((d, d))
    for Xi, ri in zip(groups_X, groups_r):
        for k in range(len(ri)):
            for l in range(len(ri)):
                pk = tau - (1.0 if ri[k] < 0 else 0.0)
                pl = tau - (1.0 if ri[l] < 0 else 0.0)
                S += pk * pl * np.outer(Xi[k], Xi[l])
    return S / len(groups_X)
