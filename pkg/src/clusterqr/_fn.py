"""Compiled Frisch-Newton interior-point kernels for linear quantile regression.

The check-function problem

    min_b  sum_i rho_tau(y_i - x_i' b)

is solved through its bounded dual

    max_a  y'a   s.t.  X'a = (1 - tau) X'1,   0 <= a <= 1,

written as the standard-form LP ``min c'x s.t. Ax = b, 0 <= x <= u`` with
``A = X'``, ``c = -y`` and ``u = 1``.  The primal coefficients are the
negated equality multipliers.  Steps follow Mehrotra's predictor-corrector
scheme; primal and dual feasibility are exact from the start, so the
complementarity ``x'z + s'w`` is the true duality gap.
"""

from __future__ import annotations

import numpy as np
from numba import njit

STEP_FRACTION = 0.99995
# slacks of residuals below this fraction of the median |residual| are offset
SLACK_OFFSET = 0.01

# status codes returned by the kernels
OK = 0
MAX_ITER = 1
BREAKDOWN = 2


@njit(cache=True, nogil=True)
def _chol_solve(M, rhs, p):
    """Solve M v = rhs for symmetric positive definite ``M`` (overwrites M)."""
    for j in range(p):
        s = M[j, j]
        for k in range(j):
            s -= M[j, k] * M[j, k]
        if not s > 0.0:
            return False
        ljj = np.sqrt(s)
        M[j, j] = ljj
        for i in range(j + 1, p):
            t = M[i, j]
            for k in range(j):
                t -= M[i, k] * M[j, k]
            M[i, j] = t / ljj
    for i in range(p):
        t = rhs[i]
        for k in range(i):
            t -= M[i, k] * rhs[k]
        rhs[i] = t / M[i, i]
    for i in range(p - 1, -1, -1):
        t = rhs[i]
        for k in range(i + 1, p):
            t -= M[k, i] * rhs[k]
        rhs[i] = t / M[i, i]
    return True


@njit(cache=True, nogil=True)
def _least_squares(X, y, out):
    N, p = X.shape
    M = np.zeros((p, p))
    for i in range(N):
        for a in range(p):
            xa = X[i, a]
            out[a] += xa * y[i]
            for b in range(a + 1):
                M[a, b] += xa * X[i, b]
    for a in range(p):
        for b in range(a + 1, p):
            M[a, b] = M[b, a]
    return _chol_solve(M, out, p)


@njit(cache=True, nogil=True)
def _newton_direction(X, D, rp, q, dy, dx, p):
    """Solve (X' D X) dy = rp + X' D q, then dx = D (X dy - q)."""
    N = X.shape[0]
    M = np.zeros((p, p))
    for a in range(p):
        dy[a] = rp[a]
    for i in range(N):
        di = D[i]
        dq = di * q[i]
        for a in range(p):
            xa = X[i, a]
            dy[a] += xa * dq
            dxa = di * xa
            for b in range(a + 1):
                M[a, b] += dxa * X[i, b]
    for a in range(p):
        for b in range(a + 1, p):
            M[a, b] = M[b, a]
    if not _chol_solve(M, dy, p):
        return False
    for i in range(N):
        t = 0.0
        for a in range(p):
            t += X[i, a] * dy[a]
        dx[i] = D[i] * (t - q[i])
    return True


@njit(cache=True, nogil=True)
def _step_lengths(x, s, z, w, dx, dz, dw):
    ap = 1.0
    ad = 1.0
    for i in range(x.shape[0]):
        if dx[i] < 0.0:
            r = -x[i] / dx[i]
            if r < ap:
                ap = r
        elif dx[i] > 0.0:
            r = s[i] / dx[i]
            if r < ap:
                ap = r
        if dz[i] < 0.0:
            r = -z[i] / dz[i]
            if r < ad:
                ad = r
        if dw[i] < 0.0:
            r = -w[i] / dw[i]
            if r < ad:
                ad = r
    return min(1.0, STEP_FRACTION * ap), min(1.0, STEP_FRACTION * ad)


@njit(cache=True, nogil=True)
def rq_fnb(X, y, tau, beta0, tol, max_iter):
    """Frisch-Newton solve of one quantile regression.

    Parameters
    ----------
    X : (N, p) float64 array
    y : (N,) float64 array
    tau : float
    beta0 : (p,) float64 array
        Starting coefficients; an empty array requests the least-squares start.
    tol : float
        Relative duality-gap tolerance, ``gap <= tol * (1 + |objective|)``.
    max_iter : int

    Returns
    -------
    beta : (p,) array
    dual : (N,) array
        The bounded dual ``a``; ``a - (1 - tau)`` is a subgradient selection.
    gap : float
    iterations : int
    status : int
    """
    N, p = X.shape
    beta = np.zeros(p)
    if beta0.shape[0] == p:
        for a in range(p):
            beta[a] = beta0[a]
    else:
        if not _least_squares(X, y, beta):
            return beta, np.zeros(N), np.inf, 0, BREAKDOWN

    x = np.empty(N)
    s = np.empty(N)
    z = np.empty(N)
    w = np.empty(N)
    # dual slack split z - w = c - A'y = X beta - y  (negated residuals)
    res = np.empty(N)
    absr = np.empty(N)
    for i in range(N):
        r = y[i]
        for a in range(p):
            r -= X[i, a] * beta[a]
        res[i] = r
        absr[i] = abs(r)
    # only slacks of near-zero residuals are lifted off the boundary; lifting
    # every slack lets the corrector cycle with tiny steps
    scale = np.median(absr)
    if scale == 0.0:
        scale = np.mean(absr)
    if scale == 0.0:
        scale = 1.0
    eps = SLACK_OFFSET * scale
    for i in range(N):
        r = res[i]
        x[i] = 1.0 - tau
        s[i] = tau
        w[i] = max(r, 0.0)
        z[i] = max(-r, 0.0)
        if absr[i] < eps:
            w[i] += eps
            z[i] += eps

    yd = -beta
    rp = np.zeros(p)  # primal equality residual is exactly zero at the start
    D = np.empty(N)
    q = np.empty(N)
    dx = np.empty(N)
    dz = np.empty(N)
    dw = np.empty(N)
    dy = np.empty(p)
    dxa = np.empty(N)
    dza = np.empty(N)
    dwa = np.empty(N)

    it = 0
    status = MAX_ITER
    gap = 0.0
    for i in range(N):
        gap += x[i] * z[i] + s[i] * w[i]
    while it < max_iter:
        # primal objective on the check-function scale: sum rho = -c'x - (1-tau)1'y
        obj = 0.0
        for i in range(N):
            r = y[i]
            for a in range(p):
                r += X[i, a] * yd[a]
            if r < 0.0:
                obj += (tau - 1.0) * r
            else:
                obj += tau * r
        if gap <= tol * (1.0 + abs(obj)):
            status = OK
            break
        it += 1

        # affine predictor
        for i in range(N):
            D[i] = 1.0 / (z[i] / x[i] + w[i] / s[i])
            q[i] = z[i] - w[i]
        if not _newton_direction(X, D, rp, q, dy, dxa, p):
            status = BREAKDOWN
            break
        for i in range(N):
            dza[i] = -z[i] - z[i] * dxa[i] / x[i]
            dwa[i] = -w[i] + w[i] * dxa[i] / s[i]
        ap, ad = _step_lengths(x, s, z, w, dxa, dza, dwa)
        gap_aff = 0.0
        for i in range(N):
            gap_aff += (x[i] + ap * dxa[i]) * (z[i] + ad * dza[i]) + (
                s[i] - ap * dxa[i]
            ) * (w[i] + ad * dwa[i])
        sigma = (gap_aff / gap) ** 3
        mu = sigma * gap / (2.0 * N)

        # centring corrector
        for i in range(N):
            cx = mu - x[i] * z[i] - dxa[i] * dza[i]
            cs = mu - s[i] * w[i] + dxa[i] * dwa[i]
            q[i] = -cx / x[i] + cs / s[i]
            dza[i] = cx
            dwa[i] = cs
        if not _newton_direction(X, D, rp, q, dy, dx, p):
            status = BREAKDOWN
            break
        for i in range(N):
            dz[i] = (dza[i] - z[i] * dx[i]) / x[i]
            dw[i] = (dwa[i] + w[i] * dx[i]) / s[i]
        ap, ad = _step_lengths(x, s, z, w, dx, dz, dw)

        gap = 0.0
        for i in range(N):
            x[i] += ap * dx[i]
            s[i] -= ap * dx[i]
            z[i] += ad * dz[i]
            w[i] += ad * dw[i]
            gap += x[i] * z[i] + s[i] * w[i]
        for a in range(p):
            yd[a] += ad * dy[a]

    for a in range(p):
        beta[a] = -yd[a]
    return beta, x, gap, it, status


@njit(cache=True, nogil=True)
def bootstrap_solves(X, y, taus, centers, xstars, ystar, tol, max_iter, warm):
    """Solve the augmented problems for all replications and quantiles.

    ``xstars`` has shape (m, G, p); the pseudo-response ``ystar`` is shared.
    Returns the coefficients (m, G, p), the pseudo-observation residuals
    (m, G), status codes (m, G) and iteration counts (m, G).
    """
    N, p = X.shape
    m, G = xstars.shape[0], xstars.shape[1]
    Xa = np.empty((N + 1, p))
    ya = np.empty(N + 1)
    for i in range(N):
        ya[i] = y[i]
        for a in range(p):
            Xa[i, a] = X[i, a]
    ya[N] = ystar
    out = np.empty((m, G, p))
    resid = np.empty((m, G))
    status = np.zeros((m, G), dtype=np.int64)
    iters = np.zeros((m, G), dtype=np.int64)
    empty = np.empty(0)
    for r in range(m):
        for g in range(G):
            for a in range(p):
                Xa[N, a] = xstars[r, g, a]
            start = centers[g] if warm else empty
            b, _, _, it, st = rq_fnb(Xa, ya, taus[g], start, tol, max_iter)
            if warm and st != OK:
                # a warm start can stall; the cold start is the reference
                b, _, _, it2, st = rq_fnb(Xa, ya, taus[g], empty, tol, max_iter)
                it += it2
            t = ystar
            for a in range(p):
                out[r, g, a] = b[a]
                t -= xstars[r, g, a] * b[a]
            resid[r, g] = t
            status[r, g] = st
            iters[r, g] = it
    return out, resid, status, iters
