from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from clusterqr import _fn, solver
from clusterqr.dataset import ClusteredDataset
from clusterqr.errors import (
    DimensionMismatch,
    InputError,
    PseudoObservationBinding,
    RankDeficientDesign,
)
from clusterqr.solver import (
    CoefficientProcess,
    PseudoObservation,
    QuantileGrid,
    check_loss,
    fit,
    fit_augmented,
    fit_process,
    objective,
    psi,
    solve,
)
from oracles import brute_force_rq, check_sum, random_instance


def _ds(y, X=None, cluster=None):
    y = np.asarray(y, dtype=float)
    X = np.ones((len(y), 1)) if X is None else np.asarray(X, dtype=float)
    cluster = np.arange(len(y)) if cluster is None else cluster
    return ClusteredDataset.from_arrays(y, X, cluster)


# ---------------------------------------------------------------- grid and containers


def test_grid_validation():
    with pytest.raises(InputError):
        QuantileGrid([])
    with pytest.raises(InputError):
        QuantileGrid([0.5, 0.5])
    with pytest.raises(InputError):
        QuantileGrid([0.0, 0.5])
    with pytest.raises(InputError):
        QuantileGrid([0.6, 0.5])
    g = QuantileGrid([0.25, 0.5])
    assert g.index(0.5) == 1 and len(g) == 2
    assert g == QuantileGrid([0.25, 0.5]) and hash(g) == hash(QuantileGrid([0.25, 0.5]))
    with pytest.raises(InputError):
        g.index(0.3)


def test_process_requires_finite_matching_shape():
    g = QuantileGrid([0.5])
    with pytest.raises(DimensionMismatch):
        CoefficientProcess(g, np.zeros((2, 1)))
    with pytest.raises(InputError):
        CoefficientProcess(g, np.array([[np.nan]]))
    with pytest.raises(InputError):
        PseudoObservation(0.0, np.zeros(1))


# ---------------------------------------------------------------- objective


def test_objective_examples():
    assert objective(_ds([1.0, 2.0], [[1.0], [2.0]]), [1.0], 0.3) == 0.0
    # one cluster: objective is the plain sum
    one = ClusteredDataset(
        y=np.array([1.0, -1.0]), X=np.ones((2, 1)), labels=(0,), offsets=np.array([0, 2]), columns=("x",)
    )
    assert objective(one, [0.0], 0.25) == pytest.approx(1.0)
    # averaging is over clusters, not observations
    assert objective(_ds([1.0, 3.0]), [0.0], 0.5) == pytest.approx(1.0)


def test_zero_residual_counts_as_not_below():
    assert psi(np.array([0.0]), 0.3)[0] == pytest.approx(0.3)
    assert check_loss(np.array([0.0, -2.0]), 0.3).tolist() == pytest.approx([0.0, 1.4])


def test_objective_rejects_bad_input():
    ds = _ds([1.0, 2.0])
    with pytest.raises(InputError):
        objective(ds, [0.0], 1.0)
    with pytest.raises(DimensionMismatch):
        objective(ds, [0.0, 1.0], 0.5)


# ---------------------------------------------------------------- fit


def test_median_of_three():
    assert fit(_ds([1.0, 2.0, 3.0]), 0.5)[0] == pytest.approx(2.0, abs=1e-8)


def test_non_unique_quartile_checked_by_objective():
    ds = _ds([1.0, 2.0, 3.0, 4.0])
    b = fit(ds, 0.25)[0]
    assert 1.0 - 1e-8 <= b <= 2.0 + 1e-8
    best = min(objective(ds, [v], 0.25) for v in (1.0, 2.0, 3.0, 4.0))
    assert objective(ds, [b], 0.25) == pytest.approx(best, abs=1e-8)


def test_three_clusters_against_brute_force(rng):
    for _ in range(20):
        X = np.column_stack([np.ones(9), rng.normal(size=9)])
        y = rng.normal(size=9)
        ds = _ds(y, X, np.repeat([0, 1, 2], 3))
        tau = float(rng.uniform(0.1, 0.9))
        b = fit(ds, tau)
        assert check_sum(X, y, b, tau) == pytest.approx(brute_force_rq(X, y, tau), rel=1e-8, abs=1e-10)


def test_solver_oracle_random(rng):
    for _ in range(60):
        X, y, tau, _ = random_instance(rng)
        sol = solve(X, y, tau)
        assert check_sum(X, y, sol.beta, tau) == pytest.approx(brute_force_rq(X, y, tau), rel=1e-8, abs=1e-10)


def test_rank_deficient_solve():
    X = np.column_stack([np.ones(5), np.ones(5)])
    with pytest.raises(RankDeficientDesign):
        solve(X, np.arange(5.0), 0.5)


def test_subgradient_certificate(mc_data):
    for tau in (0.2, 0.5, 0.8):
        sol = solve(mc_data.X, mc_data.y, tau)
        a = sol.dual
        res = mc_data.y - mc_data.X @ sol.beta
        assert np.all(a >= -1e-12) and np.all(a <= 1 + 1e-12)
        # a - (1 - tau) selects psi on nonzero residuals, and sums to a zero subgradient
        g = mc_data.X.T @ (a - (1.0 - tau))
        assert np.max(np.abs(g)) < 1e-8
        big = np.abs(res) > 1e-6
        assert np.all(np.abs((a - (1 - tau))[big] - psi(res[big], tau)) < 1e-4)


def test_objective_is_minimal_in_a_box(mc_data, rng):
    tau = 0.3
    b = fit(mc_data, tau)
    f = objective(mc_data, b, tau)
    for _ in range(1000):
        other = b + rng.uniform(-0.5, 0.5, size=b.shape)
        assert f <= objective(mc_data, other, tau) + 1e-12


def test_fit_is_deterministic(mc_data):
    assert_array_equal(fit(mc_data, 0.4), fit(mc_data, 0.4))


# ---------------------------------------------------------------- fit_process


def test_singleton_grid_reproduces_fit(mc_data):
    p = fit_process(mc_data, QuantileGrid([0.5]))
    assert_array_equal(p.betas[0], fit(mc_data, 0.5))


def test_intercept_only_quantiles():
    y = np.array([5.0, 1.0, 4.0, 2.0, 3.0, 7.0, 6.0])
    ds = _ds(y)
    p = fit_process(ds, QuantileGrid([0.25, 0.5, 0.75]))
    for tau, b in zip(p.grid.taus, p.betas[:, 0]):
        best = min(objective(ds, [v], tau) for v in y)
        assert objective(ds, [b], tau) == pytest.approx(best, abs=1e-9)
    assert p.betas[1, 0] == pytest.approx(4.0, abs=1e-8)


def test_warm_start_matches_cold_start(mc_data):
    grid = QuantileGrid(np.arange(1, 10) / 10)
    warm = fit_process(mc_data, grid, warm_start=True)
    cold = fit_process(mc_data, grid, warm_start=False)
    for g, tau in enumerate(grid.taus):
        fw = objective(mc_data, warm.betas[g], tau)
        fc = objective(mc_data, cold.betas[g], tau)
        assert fw == pytest.approx(fc, rel=1e-8)
    assert_allclose(warm.betas, cold.betas, atol=1e-5)


def test_stalled_warm_start_falls_back_to_cold(mc_data, monkeypatch):
    kernel = _fn.rq_fnb
    calls = []

    def stalling(X, y, tau, beta0, tol, max_iter):
        calls.append(beta0.size)
        if beta0.size:
            return beta0.copy(), np.zeros(len(y)), 1.0, max_iter, _fn.MAX_ITER
        return kernel(X, y, tau, beta0, tol, max_iter)

    monkeypatch.setattr(_fn, "rq_fnb", stalling)
    got = solve(mc_data.X, mc_data.y, 0.3, np.zeros(mc_data.d))
    assert calls == [mc_data.d, 0]
    # iterations of both attempts are reported
    assert got.iterations > solver.MAX_ITER
    monkeypatch.undo()
    assert_array_equal(got.beta, solve(mc_data.X, mc_data.y, 0.3).beta)


def test_large_sample_recovers_slope():
    from clusterqr.montecarlo import McConfig, generate_dgp, true_beta

    ds = generate_dgp(McConfig(n_clusters=2000, rho=0.2, seed=5), 0)
    p = fit_process(ds, QuantileGrid([0.25, 0.5, 0.75]))
    for tau, b in zip(p.grid.taus, p.betas):
        assert np.max(np.abs(b - true_beta(tau))) < 0.05


# ---------------------------------------------------------------- augmented fit


def test_zero_pseudo_covariate_is_plain_fit(mc_data):
    tau = 0.6
    base = fit(mc_data, tau)
    b = fit_augmented(mc_data, PseudoObservation(1e3, np.zeros(3)), tau)
    assert objective(mc_data, b, tau) == pytest.approx(objective(mc_data, base, tau), rel=1e-9)
    assert_allclose(b, base, atol=1e-6)
    tiny = fit_augmented(mc_data, PseudoObservation(1e3, np.full(3, 1e-9)), tau)
    assert_allclose(tiny, base, atol=1e-6)


def test_augmented_against_brute_force(rng):
    for _ in range(20):
        X = np.column_stack([np.ones(5), rng.normal(size=5)])
        y = rng.normal(size=5)
        xs = 0.2 * rng.normal(size=2)
        ys = 50.0
        tau = float(rng.uniform(0.2, 0.8))
        b = fit_augmented(_ds(y, X), PseudoObservation(ys, xs), tau)
        Xa, ya = np.vstack([X, xs]), np.append(y, ys)
        assert check_sum(Xa, ya, b, tau) == pytest.approx(brute_force_rq(Xa, ya, tau), rel=1e-8)
        assert ys > xs @ b


def test_binding_pseudo_observation_raises():
    # the pseudo point is just another observation at the 0.9 quantile
    ds = _ds([0.0, 0.0, 0.0])
    with pytest.raises(PseudoObservationBinding):
        fit_augmented(ds, PseudoObservation(1.0, np.array([1.0])), 0.9)


# ---------------------------------------------------------------- properties


instances = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(instances)
def test_convexity(seed):
    r = np.random.default_rng(seed)
    X, y, tau, cl = random_instance(r)
    ds = ClusteredDataset.from_arrays(y, X, cl, check_rank=False)
    b1, b2 = r.normal(size=(2, X.shape[1]))
    mid = objective(ds, (b1 + b2) / 2, tau)
    assert mid <= (objective(ds, b1, tau) + objective(ds, b2, tau)) / 2 + 1e-12


@settings(max_examples=40, deadline=None)
@given(instances)
def test_regression_and_scale_equivariance(seed):
    r = np.random.default_rng(seed)
    X, y, tau, _ = random_instance(r)
    b = solve(X, y, tau).beta
    gamma = r.normal(size=X.shape[1])
    assert_allclose(solve(X, y + X @ gamma, tau).beta, b + gamma, atol=1e-7)
    c = r.uniform(0.1, 10.0, size=X.shape[1])
    assert_allclose(solve(X * c, y, tau).beta, b / c, atol=1e-7, rtol=1e-7)


def test_kernel_status_codes(mc_data):
    b, a, gap, it, st_ = _fn.rq_fnb(mc_data.X, mc_data.y, 0.5, np.empty(0), 1e-9, 2)
    assert st_ == _fn.MAX_ITER


def test_saved_stalling_instances_converge_from_both_starts():
    # augmented bootstrap problems on which earlier starting rules stalled,
    # one from a warm and one from a cold start
    from pathlib import Path

    from scipy.optimize import linprog

    data = np.load(Path(__file__).with_name("stall_cases.npz"))
    for case in ("warm", "cold"):
        X, y, tau = data["X_" + case], data["y_" + case], float(data["tau_" + case])
        N, d = X.shape
        ref = linprog(
            np.concatenate([np.zeros(d), np.full(N, tau), np.full(N, 1 - tau)]),
            A_eq=np.hstack([X, np.eye(N), -np.eye(N)]),
            b_eq=y,
            bounds=[(None, None)] * d + [(0, None)] * (2 * N),
            method="highs",
        )
        for start in (data["start_" + case], None):
            sol = solve(X, y, tau, start)
            assert sol.iterations < 40
            assert_allclose(sol.beta, ref.x[:d], atol=1e-6)
            assert check_sum(X, y, sol.beta, tau) == pytest.approx(ref.fun, rel=1e-10)


def test_fitted_residuals_zero_interpolated_points(mc_data):
    from clusterqr.solver import ZERO_RTOL, fitted_residuals

    fit0 = fit_process(mc_data, QuantileGrid([0.3]))
    beta = fit0.betas[0]
    r = fitted_residuals(mc_data.X, mc_data.y, beta)
    raw = mc_data.y - mc_data.X @ beta
    zero = r == 0.0
    assert zero.sum() >= mc_data.d
    assert np.all(np.abs(raw[zero]) <= ZERO_RTOL * np.median(np.abs(raw)))
    assert_array_equal(r[~zero], raw[~zero])
    # the score no longer depends on the rounding of the solution
    for eps in (1e-11, -1e-11):
        moved = fitted_residuals(mc_data.X, mc_data.y, beta + eps)
        assert_array_equal(psi(moved, 0.3), psi(r, 0.3))
    # scale equivariance in y
    assert_array_equal(fitted_residuals(mc_data.X, 8.0 * mc_data.y, 8.0 * beta) == 0.0, zero)
    assert_array_equal(fitted_residuals(np.ones((3, 1)), np.zeros(3), [0.0]), np.zeros(3))
