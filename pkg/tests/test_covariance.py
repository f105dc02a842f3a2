from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from oracles import pss_by_definition
from scipy.stats import norm

from clusterqr.bootstrap import BootstrapEnsemble, WeightDistribution, bootstrap_ensemble
from clusterqr.covariance import (
    CovarianceFunction,
    analytical_covariance,
    analytical_covariance_function,
    bootstrap_covariance,
    hall_sheather_bandwidth,
    kernel_width,
    powell_jacobian,
    pss_sigma,
    read_covariance,
    residual_scale,
    standard_errors,
    write_covariance,
)
from clusterqr.dataset import ClusteredDataset
from clusterqr.errors import (
    EmptyWindow,
    InputError,
    InsufficientDraws,
    NegativeVariance,
    SingularJacobian,
)
from clusterqr.montecarlo import McConfig, generate_dgp
from clusterqr.solver import CoefficientProcess, QuantileGrid, fit_process


def _ensemble(draws, center, n=10):
    return BootstrapEnsemble(center, np.asarray(draws, dtype=float), n, (0,), WeightDistribution.MAMMEN, 1.0)


def _cov(blocks, n=4, taus=(0.5,)):
    return CovarianceFunction(QuantileGrid(list(taus)), np.asarray(blocks, dtype=float), n)


@pytest.fixture(scope="module")
def boot(mc_data, mc_fit):
    return bootstrap_ensemble(mc_data, mc_fit, m=99, seed=5, on_binding="accept")


# bootstrap_covariance


def test_degenerate_zero_ensemble_gives_exact_zero(mc_data, mc_fit):
    ens = bootstrap_ensemble(mc_data, mc_fit, m=5, dist="degenerate-zero", seed=1)
    cov = bootstrap_covariance(ens)
    assert np.all(cov.blocks == 0.0)
    assert np.all(standard_errors(cov) == 0.0)


def test_two_point_ensemble_by_hand():
    grid = QuantileGrid([0.3, 0.7])
    center = CoefficientProcess(grid, [[1.0, 2.0], [3.0, 4.0]])
    delta, n = 0.4, 9
    draws = np.stack([center.betas, center.betas])
    draws[1, 0, 0] += delta
    cov = bootstrap_covariance(_ensemble(draws, center, n))
    expected = np.zeros((2, 2))
    expected[0, 0] = n * delta**2 / 4
    assert_allclose(cov.block(0.3, 0.3), expected, atol=1e-15)
    assert np.all(cov.block(0.7, 0.7) == 0.0)
    assert np.all(cov.block(0.3, 0.7) == 0.0)


def test_estimate_centering_matches_definition(rng):
    grid = QuantileGrid([0.5])
    center = CoefficientProcess(grid, [[0.0, 1.0]])
    draws = rng.normal(size=(7, 1, 2)) + center.betas
    cov = bootstrap_covariance(_ensemble(draws, center, 3), centering="estimate")
    dev = draws[:, 0] - center.betas[0]
    assert_allclose(cov.blocks[0, 0], 3 * dev.T @ dev / 7, rtol=1e-13)
    assert cov.meta["centering"] == "estimate"


def test_mean_centering_matches_numpy(boot):
    cov = bootstrap_covariance(boot)
    for g in range(len(boot.grid)):
        for h in range(len(boot.grid)):
            a, b = boot.draws[:, g], boot.draws[:, h]
            ref = boot.n_clusters * (a - a.mean(0)).T @ (b - b.mean(0)) / boot.m
            assert_allclose(cov.blocks[g, h], ref, rtol=1e-10, atol=1e-12)


def test_blocks_mirror_exactly_and_diagonal_psd(boot):
    cov = bootstrap_covariance(boot)
    G = len(boot.grid)
    for g in range(G):
        for h in range(G):
            assert_array_equal(cov.blocks[g, h], cov.blocks[h, g].T)
        assert np.linalg.eigvalsh(cov.blocks[g, g]).min() >= -1e-10


def test_cauchy_schwarz_bound(boot):
    cov = bootstrap_covariance(boot)
    var = np.diagonal(cov.diagonal(), axis1=1, axis2=2)
    bound = np.sqrt(var[:, None, :, None] * var[None, :, None, :])
    assert np.all(np.abs(cov.blocks) <= bound + 1e-9)


def test_insufficient_draws_and_bad_centering(boot):
    with pytest.raises(InputError):
        bootstrap_covariance(boot, centering="median")
    ens = boot.restrict(boot.grid)
    object.__setattr__(ens, "draws", ens.draws[:1])
    with pytest.raises(InsufficientDraws):
        bootstrap_covariance(ens)


# standard_errors


def test_standard_errors_examples():
    assert np.all(standard_errors(_cov(np.zeros((1, 1, 3, 3)))) == 0.0)
    assert_allclose(standard_errors(_cov(4 * np.eye(3)[None, None], n=4)), np.ones((1, 3)))
    block = np.array([[9.0, 1.0], [1.0, 16.0]])
    assert_allclose(standard_errors(_cov(block[None, None], n=4)), [[1.5, 2.0]])
    assert_allclose(standard_errors(_cov(block[None, None], n=4), n=1), [[3.0, 4.0]])


def test_standard_errors_negative_variance():
    tiny = np.diag([-5e-11, 1.0])[None, None]
    assert standard_errors(_cov(tiny))[0, 0] == 0.0
    with pytest.raises(NegativeVariance):
        standard_errors(_cov(np.diag([-1e-6, 1.0])[None, None]))


# pss_sigma


def _toy(rng, sizes=(3, 4), d=2):
    N = sum(sizes)
    X = np.column_stack([np.ones(N), rng.normal(size=(N, d - 1))])
    y = rng.normal(size=N)
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    return ClusteredDataset.from_arrays(y, X, cluster)


def test_pss_constant_psi(rng):
    ds = _toy(rng)
    ds = ClusteredDataset.from_arrays(np.abs(ds.y) + 100.0, ds.X, ds.cluster_index)
    center = CoefficientProcess(QuantileGrid([0.5]), [[0.0, 0.0]])
    S = ds.cluster_sums(0.5 * ds.X)
    assert_allclose(pss_sigma(ds, center, 0.5), S.T @ S / ds.n, rtol=1e-14)


def test_pss_singletons_reduce_to_independent_scores(rng):
    ds = _toy(rng, sizes=(1,) * 8)
    center = CoefficientProcess(QuantileGrid([0.3]), [[0.1, -0.2]])
    r = ds.y - ds.X @ center.at(0.3)
    p = 0.3 - (r < 0)
    ref = (ds.X * (p * p)[:, None]).T @ ds.X / ds.n
    assert_allclose(pss_sigma(ds, center, 0.3), ref, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pss_matches_triple_sum(seed):
    rng = np.random.default_rng(seed)
    sizes = tuple(int(c) for c in rng.integers(2, 5, size=2))
    ds = _toy(rng, sizes=sizes, d=3)
    tau = float(rng.uniform(0.1, 0.9))
    center = CoefficientProcess(QuantileGrid([tau]), [rng.normal(size=3)])
    r = ds.y - ds.X @ center.at(tau)
    groups_X = [ds.X[ds.cluster_index == i].tolist() for i in range(ds.n)]
    groups_r = [r[ds.cluster_index == i].tolist() for i in range(ds.n)]
    assert_allclose(pss_sigma(ds, center, tau), pss_by_definition(groups_X, groups_r, tau), rtol=1e-12, atol=1e-14)


# Hall-Sheather bandwidth


def test_hall_sheather_median_closed_form():
    z = norm.ppf(0.975)
    for N in (10, 100, 1000):
        ref = N ** (-1 / 3) * z ** (2 / 3) * (1.5 / (2 * math.pi)) ** (1 / 3)
        assert hall_sheather_bandwidth(N, 0.5) == pytest.approx(ref, rel=1e-13)


def test_hall_sheather_decreasing_in_n():
    h = [hall_sheather_bandwidth(N, 0.3, 0.1) for N in (10, 50, 250, 1250)]
    assert all(a > b for a, b in zip(h, h[1:]))


def test_hall_sheather_scalar_oracle():
    # independent evaluation with math.erf-based quantile via bisection
    def phi_inv(p):
        lo, hi = -10.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < p:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    z = phi_inv(0.975)
    ref = 1000 ** (-1 / 3) * z ** (2 / 3) * (1.5 * (1 / (2 * math.pi)) / 1.0) ** (1 / 3)
    assert hall_sheather_bandwidth(1000, 0.5, 0.05) == pytest.approx(ref, rel=1e-12)
    assert ref == pytest.approx(0.0969, abs=5e-4)
    # off-median value
    q = phi_inv(0.2)
    dens = math.exp(-q * q / 2) / math.sqrt(2 * math.pi)
    ref2 = 400 ** (-1 / 3) * z ** (2 / 3) * (1.5 * dens**2 / (2 * q * q + 1)) ** (1 / 3)
    assert hall_sheather_bandwidth(400, 0.2) == pytest.approx(ref2, rel=1e-10)


def test_hall_sheather_domain():
    for tau, alpha in ((0.0, 0.05), (1.0, 0.05), (0.5, 0.0), (0.5, 1.0)):
        with pytest.raises(InputError):
            hall_sheather_bandwidth(100, tau, alpha)


# residual scale and kernel width


def test_residual_scale_rules(rng):
    r = rng.normal(size=501)
    q75, q25 = np.percentile(r, [75, 25])
    assert residual_scale(r) == pytest.approx(min(r.std(ddof=1), (q75 - q25) / 1.349))
    assert residual_scale(r, "mad") == pytest.approx(np.median(np.abs(r - np.median(r))))
    with pytest.raises(InputError):
        residual_scale(r, "range")


def test_kernel_width_variants(rng):
    r = rng.normal(size=200)
    k = residual_scale(r)
    assert kernel_width(r, 0.5, 0.1, None) == 0.1
    assert kernel_width(r, 0.5, 0.1, quantile_transform=False) == pytest.approx(0.1 * k)
    assert kernel_width(r, 0.5, 0.1) == pytest.approx(k * (norm.ppf(0.6) - norm.ppf(0.4)))
    # the probability window is clipped to stay inside (0, 1)
    assert np.isfinite(kernel_width(r, 0.05, 0.2))


# Powell Jacobian


def _fixed_residual_dataset(res, X):
    ds = ClusteredDataset.from_arrays(np.asarray(res, float), X, np.arange(len(res)) // 2)
    center = CoefficientProcess(QuantileGrid([0.5]), [np.zeros(X.shape[1])])
    return ds, center


def test_powell_empty_window():
    X = np.column_stack([np.ones(4), [1.0, 2.0, 3.0, 4.0]])
    ds, center = _fixed_residual_dataset([5.0, -5.0, 6.0, -7.0], X)
    with pytest.raises(EmptyWindow):
        powell_jacobian(ds, center, 0.5, 1.0, scale=None)


def test_powell_all_inside():
    X = np.column_stack([np.ones(4), [1.0, 2.0, 3.0, 4.0]])
    ds, center = _fixed_residual_dataset([0.1, -0.2, 0.3, -0.05], X)
    h = 1.0
    J = powell_jacobian(ds, center, 0.5, h, scale=None)
    assert_allclose(J, X.T @ X / (2 * h * ds.n), rtol=1e-14)


def test_powell_straddling_direct_sum():
    X = np.column_stack([np.ones(6), [1.0, -1.0, 2.0, 0.5, 3.0, -2.0]])
    res = [0.2, -0.5, 0.5001, -0.4999, 1.5, 0.0]
    ds, center = _fixed_residual_dataset(res, X)
    h = 0.5
    ref = np.zeros((2, 2))
    for r, x in zip(res, X):
        if abs(r) <= h:
            ref += np.outer(x, x)
    ref /= 2 * h * 3
    assert_allclose(powell_jacobian(ds, center, 0.5, h, scale=None), ref, rtol=1e-14)


def test_powell_gaussian_and_bad_inputs(mc_data, mc_fit):
    J = powell_jacobian(mc_data, mc_fit, 0.5, 0.1, kernel="gaussian")
    assert np.linalg.eigvalsh(J).min() > 0
    with pytest.raises(InputError):
        powell_jacobian(mc_data, mc_fit, 0.5, 0.1, kernel="epanechnikov")
    with pytest.raises(InputError):
        powell_jacobian(mc_data, mc_fit, 0.5, 0.0)


def test_powell_and_pss_invariant_to_within_cluster_order(mc_data, mc_fit, rng):
    perm = np.concatenate(
        [rng.permutation(np.flatnonzero(mc_data.cluster_index == i)) for i in range(mc_data.n)]
    )
    other = ClusteredDataset.from_arrays(mc_data.y[perm], mc_data.X[perm], mc_data.cluster_index[perm])
    for tau in (0.25, 0.5):
        assert_allclose(pss_sigma(other, mc_fit, tau), pss_sigma(mc_data, mc_fit, tau), rtol=1e-12)
        assert_allclose(
            powell_jacobian(other, mc_fit, tau, 0.1), powell_jacobian(mc_data, mc_fit, tau, 0.1), rtol=1e-12
        )


# analytical sandwich


def test_analytical_unclustered_is_classical_sandwich(mc_data, mc_fit):
    tau = 0.5
    h = hall_sheather_bandwidth(mc_data.N, tau)
    J = powell_jacobian(mc_data, mc_fit, tau, h)
    Jinv = np.linalg.inv(J)
    ref = tau * (1 - tau) * Jinv @ (mc_data.X.T @ mc_data.X / mc_data.n) @ Jinv
    assert_allclose(analytical_covariance(mc_data, mc_fit, tau, clustered=False), ref, rtol=1e-10)


def test_analytical_symmetric_psd(mc_data, mc_fit):
    for clustered in (True, False):
        for tau in mc_fit.grid.taus:
            V = analytical_covariance(mc_data, mc_fit, float(tau), clustered=clustered)
            assert_array_equal(V, V.T)
            assert np.linalg.eigvalsh(V).min() >= -1e-10


def test_singular_jacobian():
    # the second regressor is zero on every observation inside the window
    N = 40
    x = np.where(np.arange(N) < 20, 0.0, 1.0)
    res = np.where(np.arange(N) < 20, 0.0, 50.0 + np.arange(N))
    X = np.column_stack([np.ones(N), x])
    ds = ClusteredDataset.from_arrays(res, X, np.arange(N) // 4)
    center = CoefficientProcess(QuantileGrid([0.5]), [[0.0, 0.0]])
    with pytest.raises(SingularJacobian):
        analytical_covariance(ds, center, 0.5, scale=None)


def test_clustered_and_plain_agree_without_dependence():
    # at rho = 0 cross-cluster-member terms have mean zero
    cfg = McConfig(n_clusters=60, rho=0.0, seed=3)
    grid = QuantileGrid([0.5])
    a, b = [], []
    for r in range(40):
        ds = generate_dgp(cfg, r)
        fit = fit_process(ds, grid)
        a.append(analytical_covariance(ds, fit, 0.5, clustered=True)[1, 1])
        b.append(analytical_covariance(ds, fit, 0.5, clustered=False)[1, 1])
    assert np.mean(a) == pytest.approx(np.mean(b), rel=0.2)


def test_analytical_function_has_nan_cross_blocks(mc_data, mc_fit):
    cov = analytical_covariance_function(mc_data, mc_fit)
    assert np.all(np.isnan(cov.block(0.25, 0.5)))
    assert np.all(np.isfinite(cov.diagonal()))
    assert cov.meta["clustered"] is True


# serialization and permutation invariance


def test_covariance_round_trip(boot, tmp_path):
    cov = bootstrap_covariance(boot)
    path = tmp_path / "cov.csv"
    write_covariance(cov, path)
    back = read_covariance(path)
    assert_array_equal(back.blocks, cov.blocks)
    assert back.n == cov.n
    assert back.meta["centering"] == "mean"
    assert back.grid == cov.grid


def test_read_covariance_rejects_other_files(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("tau,tau2\n")
    with pytest.raises(InputError):
        read_covariance(path)


def test_cluster_permutation_bit_identical(mc_data, mc_fit, rng):
    labels = np.asarray(mc_data.labels)[mc_data.cluster_index]
    order = rng.permutation(mc_data.n)
    perm = np.concatenate([np.flatnonzero(mc_data.cluster_index == i) for i in order])
    other = ClusteredDataset.from_arrays(mc_data.y[perm], mc_data.X[perm], labels[perm])
    fit2 = fit_process(other, mc_fit.grid)
    assert_array_equal(fit2.betas, mc_fit.betas)
    e1 = bootstrap_ensemble(mc_data, mc_fit, m=20, seed=9)
    e2 = bootstrap_ensemble(other, fit2, m=20, seed=9)
    assert_array_equal(bootstrap_covariance(e1).blocks, bootstrap_covariance(e2).blocks)
    assert_array_equal(
        analytical_covariance(mc_data, mc_fit, 0.5), analytical_covariance(other, fit2, 0.5)
    )
