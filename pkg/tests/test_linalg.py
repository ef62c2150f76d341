import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_positive_graph, random_signed_graph
from pcgsp.errors import SolverError
from pcgsp.graph import GraphConfig, WeightedGraph, block3, build_knn_graph, laplacian
from pcgsp.linalg import (EXACT_EIGPAIR_LIMIT, SpectralBounds, cg_solve, condition_bound, dense_eig,
                          eigenvalues_below, gershgorin_bounds, gsf_solve, lanczos, lanczos_filter, power_lambda_max, smallest_eigpair,
                          tridiagonal_eigh)
from pcgsp.normals import cross_orientation, linearize, orient_mst, pca_normals, select_pairs
from pcgsp.pcio import PointCloud, knn_search
from pcgsp.restore import spectral_bounds
from pcgsp.synthetic import make_cloud


def random_spd(seed, d, shift=1.0):
    A = np.random.default_rng(seed).normal(size=(d, d))
    return A @ A.T / d + shift * np.eye(d)


def random_symmetric(seed, d):
    A = np.random.default_rng(seed).normal(size=(d, d))
    return (A + A.T) / 2


def filter_system(seed, d, gamma):
    L = laplacian(random_positive_graph(seed, d, p=0.1))
    return L, np.random.default_rng(seed).normal(size=d), sp.identity(d) + gamma * L


# ------------------------------------------------------------------ CG


def test_cg_identity():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(cg_solve(sp.identity(3), b), b)


def test_cg_diagonal():
    np.testing.assert_allclose(cg_solve(np.diag([2.0, 2.0]), np.array([4.0, 6.0])), [2, 3])


def test_cg_random_spd_matches_dense_solve():
    M = random_spd(0, 100)
    b = np.random.default_rng(1).normal(size=100)
    ref = np.linalg.solve(M, b)
    x = cg_solve(M, b)
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) <= 1e-6
    assert np.linalg.norm(M @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_cg_iteration_cap_reports_residual():
    M = random_spd(2, 200, shift=1e-6)
    with pytest.raises(SolverError) as info:
        cg_solve(M, np.ones(200), tol=1e-14, max_iter=3)
    assert info.value.residual > 0


def test_cg_zero_rhs():
    np.testing.assert_array_equal(cg_solve(np.eye(4), np.zeros(4)), np.zeros(4))


# ------------------------------------------------------------------ smallest eigenpair


def test_laplacian_smallest_pair_is_constant():
    lam, v = smallest_eigpair(laplacian(random_positive_graph(0, 40)), tol=1e-8)
    assert lam == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(v, np.full(40, 1 / np.sqrt(40)), atol=1e-6)


def test_two_by_two():
    lam, v = smallest_eigpair(np.array([[2.0, -1.0], [-1.0, 3.0]]))
    assert lam == pytest.approx((5 - np.sqrt(5)) / 2, abs=1e-8)
    assert v[0] > 0


@given(st.integers(0, 10**6))
def test_smallest_eigpair_matches_oracle(seed):
    M = random_spd(seed, 50, shift=0.0)
    lam, v = smallest_eigpair(M, tol=1e-8)
    assert abs(lam - np.linalg.eigvalsh(M)[0]) <= 1e-7
    assert np.linalg.norm(M @ v - lam * v) <= 1e-8
    assert np.linalg.norm(v) == pytest.approx(1.0)
    first = v[np.flatnonzero(np.abs(v) > 1e-12)[0]]
    assert first > 0
    assert lam >= gershgorin_bounds(M)[1] - 1e-9


def test_smallest_eigpair_clustered_spectrum():
    vals = np.r_[1e-9 * np.arange(5), np.linspace(1, 2, 195)]
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(200, 200)))
    M = (Q * vals) @ Q.T
    lam, v = smallest_eigpair(M, tol=1e-8)
    assert lam == pytest.approx(0.0, abs=1e-7)
    assert np.linalg.norm(M @ v - lam * v) <= 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_iterative_path_on_large_sparse_matrix(seed):
    d = EXACT_EIGPAIR_LIMIT + 200
    L = laplacian(random_positive_graph(seed, d, p=0.005))
    M = L + sp.diags(np.random.default_rng(seed).uniform(0.0, 0.5, d))
    lam, v = smallest_eigpair(M, tol=1e-8)
    assert np.linalg.norm(M @ v - lam * v) <= 1e-8
    assert lam == pytest.approx(np.linalg.eigvalsh(M.toarray())[0], abs=1e-7)


def test_iterative_path_on_near_degenerate_bottom():
    # two disconnected paths with tiny loops: the bottom pair is nearly degenerate
    d = EXACT_EIGPAIR_LIMIT + 200
    half = d // 2
    i = np.r_[np.arange(half - 1), half + np.arange(half - 1)]
    g = WeightedGraph(d, i, i + 1, np.ones(i.size), np.r_[np.full(half, 1e-6), np.full(half, 2e-6)])
    M = laplacian(g, "generalized")
    lam, v = smallest_eigpair(M, tol=1e-8)
    assert np.linalg.norm(M @ v - lam * v) <= 1e-8
    assert lam == pytest.approx(np.linalg.eigvalsh(M.toarray())[0], abs=1e-7)


@given(st.integers(0, 10**6), st.floats(-1.0, 3.0))
def test_inertia_count_matches_dense_spectrum(seed, sigma):
    g = random_signed_graph(seed, n=40, loop_margin=0.0)
    M = laplacian(g, "generalized") - sp.identity(40)
    eig = np.linalg.eigvalsh(M.toarray())
    count = eigenvalues_below(M, sigma)
    if np.min(np.abs(eig - sigma)) > 1e-8 and count is not None:
        assert count == int(np.sum(eig < sigma))


def test_power_lambda_max():
    M = np.diag([1.0, 2.0, 5.0])
    assert power_lambda_max(M, iters=200) == pytest.approx(5.0, rel=1e-6)


# ------------------------------------------------------------------ Lanczos


def test_zero_operator_filter_is_identity():
    q = np.random.default_rng(0).normal(size=20)
    np.testing.assert_allclose(lanczos_filter(sp.csr_matrix((20, 20)), q, 0.5, 5), q)


def test_full_order_filter_is_exact():
    L, q, M = filter_system(1, 60, 0.7)
    ref = np.linalg.solve(M.toarray(), q)
    np.testing.assert_allclose(lanczos_filter(L, q, 0.7, 60), ref, atol=1e-6)


def test_filter_error_shrinks_with_order():
    errors = {order: [] for order in (5, 10, 20)}
    for seed in range(20):
        L, q, M = filter_system(seed, 100, 1.0)
        ref = np.linalg.solve(M.toarray(), q)
        for order in errors:
            errors[order].append(np.linalg.norm(lanczos_filter(L, q, 1.0, order) - ref))
    medians = [np.median(errors[o]) for o in (5, 10, 20)]
    assert medians[0] >= medians[1] >= medians[2]


def test_filter_of_zero_signal():
    np.testing.assert_array_equal(lanczos_filter(sp.identity(5), np.zeros(5), 1.0, 3), np.zeros(5))


def test_filter_rejects_bad_arguments():
    with pytest.raises(ValueError):
        lanczos_filter(sp.identity(3), np.ones(3), -1.0, 3)
    with pytest.raises(ValueError):
        lanczos_filter(sp.identity(3), np.ones(3), 1.0, 0)


def test_lanczos_breakdown_truncates_order():
    L = sp.diags([1.0, 1.0, 2.0, 2.0])
    assert lanczos(L, np.ones(4), 4).order == 2


@given(st.integers(0, 10**6), st.integers(1, 30))
def test_lanczos_basis_invariants(seed, order):
    L, q, _ = filter_system(seed, 40, 1.0)
    lb = lanczos(L, q, order)
    V = lb.basis
    np.testing.assert_allclose(V.T @ V, np.eye(lb.order), atol=1e-8)
    np.testing.assert_allclose(V.T @ (L @ V), lb.tridiagonal(), atol=1e-6)


@given(st.integers(0, 10**6), st.integers(1, 40))
def test_tridiagonal_eigh_matches_dense(seed, n):
    rng = np.random.default_rng(seed)
    diag, off = rng.normal(size=n), rng.normal(size=n - 1)
    T = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    vals, Z = tridiagonal_eigh(diag, off)
    np.testing.assert_allclose(vals, np.linalg.eigvalsh(T), atol=1e-10)
    np.testing.assert_allclose(T @ Z, Z * vals, atol=1e-9)
    _, first = tridiagonal_eigh(diag, off, first_row_only=True)
    np.testing.assert_allclose(np.abs(first[0]), np.abs(Z[0]), atol=1e-9)


# ------------------------------------------------------------------ Gershgorin


def test_gershgorin_two_by_two():
    _, lo, hi = gershgorin_bounds(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    assert (lo, hi) == (1.0, 3.0)


def test_gershgorin_laplacian_lower_is_zero():
    _, lo, _ = gershgorin_bounds(laplacian(random_positive_graph(3)))
    assert lo == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10**6))
def test_gershgorin_brackets_spectrum(seed):
    M = random_symmetric(seed, 30)
    discs, lo, hi = gershgorin_bounds(sp.csr_matrix(M))
    eig = np.linalg.eigvalsh(M)
    assert lo <= eig[0] + 1e-12 and eig[-1] <= hi + 1e-12
    assert np.all(discs.radii >= 0)


# ------------------------------------------------------------------ condition bound


def test_condition_bound_gamma_zero():
    assert condition_bound(0.0, SpectralBounds(6.0, 1.0)) == 1.0
    assert np.linalg.cond(np.eye(3)) == 1.0


def test_condition_bound_arithmetic():
    assert condition_bound(0.5, SpectralBounds(6.0, 1.0)) == 19.0


def test_condition_bound_rejects_bad_geometry():
    with pytest.raises(ValueError):
        condition_bound(0.5, SpectralBounds(6.0, 0.0))


@pytest.mark.parametrize("seed", range(100))
def test_condition_bound_holds_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(0.01, 2.0)
    _, cloud = make_cloud(("plane", "sphere", "cube")[seed % 3], 30, 0.05, seed)
    pts = cloud.points
    normals, _ = orient_mst(pca_normals(pts, 6), pts, 6)
    nodes = np.arange(30)
    pairs = select_pairs(nodes, knn_search(pts, 6).tolist(), pts)
    lin = linearize(nodes, pairs, pts, cross_orientation(nodes, pairs, pts, normals))
    graph = build_knn_graph(PointCloud(pts, normals), GraphConfig(k=6, sigma_p=1.0))
    Lbar = block3(laplacian(graph)).toarray()
    A = lin.A_bar.toarray()
    bounds = spectral_bounds(graph, pairs)
    assert bounds.rho_max >= np.linalg.eigvalsh(Lbar)[-1] - 1e-12
    assert bounds.min_geom > 0
    cond = np.linalg.cond(np.eye(A.shape[1]) + gamma * A.T @ Lbar @ A)
    assert cond <= condition_bound(gamma, bounds) * (1 + 1e-9)


# ------------------------------------------------------------------ dense oracle and GSF


def test_dense_eig_examples():
    np.testing.assert_allclose(dense_eig(np.diag([1.0, 2.0, 3.0])).eigenvalues, [1, 2, 3])
    np.testing.assert_allclose(dense_eig(np.array([[2.0, -1], [-1, 2]])).eigenvalues, [1, 3])


def test_dense_eig_residuals_and_reconstruction():
    M = random_symmetric(4, 50)
    eig = dense_eig(M)
    Phi = eig.eigenvectors
    np.testing.assert_allclose(M @ Phi, Phi * eig.eigenvalues, atol=1e-8)
    np.testing.assert_allclose(Phi.T @ Phi, np.eye(50), atol=1e-8)
    np.testing.assert_allclose(eig.reconstruct(), M, atol=1e-8)


def test_dense_eig_cap():
    with pytest.raises(ValueError):
        dense_eig(sp.identity(501))


def test_gsf_gamma_zero_and_eigenvector_input():
    L = laplacian(random_positive_graph(5, 20)).toarray()
    q = np.random.default_rng(5).normal(size=20)
    np.testing.assert_array_equal(gsf_solve(L, q, 0.0), q)
    eig = dense_eig(L)
    phi, mu = eig.eigenvectors[:, 7], eig.eigenvalues[7]
    np.testing.assert_allclose(gsf_solve(L, phi, 0.5), phi / (1 + 0.5 * mu), atol=1e-10)


def test_gsf_response_is_low_pass():
    eig = dense_eig(laplacian(random_positive_graph(6, 20)))
    resp = eig.response(0.5)
    assert np.all(np.diff(resp)[np.diff(eig.eigenvalues) > 1e-9] < 0)


@given(st.integers(0, 10**6), st.floats(0.01, 5.0))
def test_three_filter_paths_agree(seed, gamma):
    d = 80
    L, q, M = filter_system(seed, d, gamma)
    x_cg = cg_solve(M, q, tol=1e-12)
    x_gsf = gsf_solve(L, q, gamma)
    x_lz = lanczos_filter(L, q, gamma, d)
    np.testing.assert_allclose(x_gsf, x_cg, atol=1e-8)
    np.testing.assert_allclose(x_lz, x_cg, atol=1e-6)
