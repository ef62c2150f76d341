import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_balanced_graph, random_positive_graph
from pcgsp.balance import greedy_balance
from pcgsp.errors import ContractError, ParseError
from pcgsp.graph import GraphConfig, WeightedGraph, block3, laplacian
from pcgsp.linalg import gershgorin_bounds
from pcgsp.pcio import PointCloud
from pcgsp.sampling import (SamplingSet, binary_search_budget, build_prior, first_eigenvectors,
                            gdas_for_target, gdpa_transform, sample_subcloud)
from pcgsp.sampling import _prepare
from pcgsp.synthetic import make_cloud


def aligned_instance(seed, n=30):
    g, _ = random_balanced_graph(seed, n)
    Lcal = laplacian(g, "generalized")
    v, lam = first_eigenvectors(Lcal)
    return Lcal, gdpa_transform(Lcal, v), lam[0]


def min_eig(M):
    """Smallest eigenvalue of a symmetric matrix."""
    M = M.toarray() if sp.issparse(M) else M
    return np.linalg.eigvalsh(M)[0]


def hth(samples, group_size=1):
    return sp.diags(samples.hth_diagonal(group_size))


# ------------------------------------------------------------------ sample sets


def test_sampling_set_selection_matrix():
    s = SamplingSet([1, 4], 6)
    H = s.selection_matrix().toarray()
    assert H.shape == (2, 6)
    np.testing.assert_array_equal(H.sum(axis=1), [1, 1])
    np.testing.assert_array_equal(np.flatnonzero(H[1]), [4])
    assert s.hth_diagonal(3).sum() == 3 * s.m


@pytest.mark.parametrize("selected", [[2, 1], [0, 0], [6]])
def test_sampling_set_rejects_bad_indices(selected):
    with pytest.raises(ValueError):
        SamplingSet(selected, 6)


def test_sampling_set_round_trip(tmp_path):
    s = SamplingSet([0, 3, 9], 10)
    s.save(tmp_path / "s.txt", achieved_T=0.25)
    assert (tmp_path / "s.txt").read_text().splitlines()[0] == "# n=10 m=3 T=0.25"
    back, T = SamplingSet.load(tmp_path / "s.txt")
    np.testing.assert_array_equal(back.selected, s.selected)
    assert (back.n, T) == (10, 0.25)


def test_sampling_set_count_mismatch(tmp_path):
    (tmp_path / "s.txt").write_text("# n=10 m=3 T=0.1\n1\n2\n")
    with pytest.raises(ParseError):
        SamplingSet.load(tmp_path / "s.txt")


# ------------------------------------------------------------------ GDPA


def test_gdpa_positive_laplacian_is_unchanged():
    L = laplacian(random_positive_graph(0))
    v, lam = first_eigenvectors(L)
    Lp = gdpa_transform(L, v)
    np.testing.assert_allclose(Lp.toarray(), L.toarray(), atol=1e-10)
    discs, lo, _ = gershgorin_bounds(Lp)
    np.testing.assert_allclose(discs.left_ends, 0.0, atol=1e-8)


def test_gdpa_two_by_two():
    M = sp.csr_matrix([[2.0, -1.0], [-1.0, 3.0]])
    v, _ = first_eigenvectors(M)
    discs, _, _ = gershgorin_bounds(gdpa_transform(M, v))
    np.testing.assert_allclose(discs.left_ends, (5 - np.sqrt(5)) / 2, atol=1e-8)


@given(st.integers(0, 10**6))
def test_gdpa_aligns_every_left_end(seed):
    Lcal, Lp, lam = aligned_instance(seed, n=40)
    discs, _, _ = gershgorin_bounds(Lp)
    assert np.max(np.abs(discs.left_ends - min_eig(Lcal))) <= 1e-8
    np.testing.assert_allclose(Lp.diagonal(), Lcal.diagonal())


def test_gdpa_rejects_vanishing_entries():
    with pytest.raises(ContractError):
        gdpa_transform(sp.identity(3), np.array([1.0, 0.0, 1.0]))


def test_first_eigenvectors_handle_components():
    g = WeightedGraph(4, [0, 2], [1, 3], [1.0, 1.0], [0.0, 0.0, 1.0, 1.0])
    v, lam = first_eigenvectors(laplacian(g, "generalized"))
    np.testing.assert_allclose(lam, [0, 0, 1, 1], atol=1e-12)
    np.testing.assert_allclose(v, np.full(4, 1 / np.sqrt(2)))


# ------------------------------------------------------------------ GDAS


def test_sampling_center_node_of_line_moves_its_disc():
    L = laplacian(WeightedGraph(4, [0, 1, 2], [1, 2, 3], [1.0, 1.0, 1.0]))
    discs, _, _ = gershgorin_bounds(L)
    assert discs.left_ends[2] == 0.0
    discs, _, _ = gershgorin_bounds(hth(SamplingSet([2], 4)) + L)
    assert discs.left_ends[2] == 1.0


def test_target_at_floor_needs_no_samples():
    _, Lp, lam = aligned_instance(1)
    out = gdas_for_target(Lp, 0.5, 0.5 * lam)
    assert out.feasible and out.sample_count == 0
    np.testing.assert_allclose(out.scalars, 1.0)


@given(st.integers(0, 10**6), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_gdas_bound_is_sound(seed, mu, frac):
    Lcal, Lp, lam = aligned_instance(seed)
    T = mu * lam + frac * (1.0 + mu * Lp.diagonal().max() - mu * lam)
    out = gdas_for_target(Lp, mu, T)
    if out.feasible:
        # H^T H is diagonal, so the GDPA similarity leaves the spectrum of the system unchanged
        assert min_eig(hth(out.samples) + mu * Lcal) >= out.achieved_T - 1e-9
        assert np.all(out.scalars > 0)


@pytest.mark.xfail(strict=True, reason="raising T rescales rows visited early in the BFS, which can spare a "
                   "later row from sampling; about one instance in six shows a drop in the count")
def test_sample_count_non_decreasing_in_target():
    for seed in range(200):
        _, Lp, lam = aligned_instance(seed)
        counts = [gdas_for_target(Lp, 0.3, T).sample_count for T in np.linspace(0.3 * lam, 0.9, 12)]
        assert all(a <= b for a, b in zip(counts, counts[1:])), f"seed {seed}: {counts}"


@given(st.integers(0, 10**6))
def test_feasibility_is_monotone_in_target(seed):
    # the budget search only needs this: once a target fails, every larger one fails too
    _, Lp, lam = aligned_instance(seed)
    feasible = [gdas_for_target(Lp, 0.3, T).feasible for T in np.linspace(0.3 * lam, 1.0 + 0.3 * Lp.diagonal().max(), 25)]
    assert feasible == sorted(feasible, reverse=True)


def test_gdas_rejects_bad_group_size():
    with pytest.raises(ValueError):
        gdas_for_target(sp.identity(4), 1.0, 0.0, group_size=3)


# ------------------------------------------------------------------ binary search


def test_zero_budget_keeps_floor():
    _, Lp, lam = aligned_instance(2)
    best, _ = binary_search_budget(Lp, 0.5, 0)
    assert best.sample_count == 0
    assert best.achieved_T == pytest.approx(0.5 * lam, abs=1e-9)


def test_full_budget_matches_target_sweep():
    _, Lp, lam = aligned_instance(3)
    mu = 0.5
    best, _ = binary_search_budget(Lp, mu, Lp.shape[0])
    high = 1.0 + mu * Lp.diagonal().max()
    grid = np.linspace(mu * lam, high, 2001)
    feasible = [T for T in grid if gdas_for_target(Lp, mu, T).feasible]
    assert best.achieved_T >= max(feasible) - (high - mu * lam) / 2000 - 1e-6 * (high - mu * lam)


@given(st.integers(0, 10**6), st.integers(0, 29), st.integers(0, 29))
def test_budget_monotonicity(seed, m1, m2):
    m1, m2 = sorted((m1, m2))
    _, Lp, _ = aligned_instance(seed)
    b1, _ = binary_search_budget(Lp, 0.3, m1)
    b2, _ = binary_search_budget(Lp, 0.3, m2)
    assert b1.sample_count <= m1 and b2.sample_count <= m2
    assert b1.achieved_T <= b2.achieved_T + 1e-9


@given(st.integers(0, 10**6), st.integers(1, 29))
def test_chain_of_bounds(seed, m):
    g, _ = random_balanced_graph(seed, 30)
    # unbalance it by flipping one edge, then rebalance
    w = g.weights.copy()
    w[0] = -w[0]
    signed = WeightedGraph(g.n, g.rows, g.cols, w, g.self_loops)
    bal = greedy_balance(signed, seed=seed)
    v, _ = first_eigenvectors(bal.Lcal_B)
    Lp = gdpa_transform(bal.Lcal_B, v)
    best, _ = binary_search_budget(Lp, 0.3, m)
    HtH = hth(best.samples)
    balanced = min_eig(HtH + 0.3 * bal.Lcal_B)
    original = min_eig(HtH + 0.3 * laplacian(signed, "generalized"))
    assert best.achieved_T <= balanced + 1e-9
    assert balanced <= original + 1e-9


# ------------------------------------------------------------------ sub-cloud pipeline


def test_prior_reproduces_normal_smoothness_at_expansion_point():
    _, cloud = make_cloud("sphere", 120, 0.05, 0)
    prior = build_prior(cloud, GraphConfig(k=8, sigma_p=1.0))
    p = cloud.points.ravel()
    lin = prior.linearization
    n_lin = lin.evaluate(cloud.points)
    L = laplacian(prior.graph)
    fglr = sum(n_lin[:, c] @ (L @ n_lin[:, c]) for c in range(3))
    const = lin.b_bar @ (block3(L) @ lin.b_bar)
    assert p @ (prior.Lcal @ p) + 2 * prior.c @ p + const == pytest.approx(fglr, rel=1e-8)


def test_build_prior_rejects_tiny_cloud():
    with pytest.raises(ValueError):
        build_prior(PointCloud(np.random.default_rng(0).normal(size=(5, 3))), GraphConfig(k=10))


def test_subcloud_output_contract():
    _, cloud = make_cloud("sphere", 200, 0.1, 1)
    s, diag = sample_subcloud(cloud, m=60, seed=1)
    assert s.m == 60 and s.n == 200
    assert np.all(np.diff(s.selected) > 0)
    assert diag["greedy_count"] <= 60
    assert diag["relative_error"] >= 0


def test_subcloud_with_zero_mu_takes_first_bfs_nodes():
    _, cloud = make_cloud("plane", 150, 0.1, 2)
    s, diag = sample_subcloud(cloud, mu=0.0, m=40, seed=0)
    assert diag["achieved_T"] == 0.0
    bal = diag["balanced"]
    v, _ = first_eigenvectors(bal.Lcal_B)
    order = _prepare(gdpa_transform(bal.Lcal_B, v) * 0.0)[4] // 3
    _, first = np.unique(order, return_index=True)
    bfs_points = order[np.sort(first)]
    np.testing.assert_array_equal(s.selected, np.sort(bfs_points[:40]))


def test_subcloud_budget_bounds():
    _, cloud = make_cloud("plane", 60, 0.1, 2)
    with pytest.raises(ValueError):
        sample_subcloud(cloud, m=61)
    with pytest.raises(ValueError):
        sample_subcloud(cloud)


@pytest.mark.xfail(strict=False, reason="disc-based selection spends the whole budget where the balanced "
                   "bound is weakest; dense lambda_min of the original system does not follow it")
def test_subcloud_beats_random_selection_on_noisy_plane():
    wins = 0
    for seed in range(20):
        _, cloud = make_cloud("plane", 500, 0.1, seed)
        ours, diag = sample_subcloud(cloud, m=150, seed=seed)
        Lcal = diag["prior"].Lcal.toarray()
        rand = SamplingSet(np.sort(np.random.default_rng(seed).choice(500, 150, replace=False)), 500)
        lam = [min_eig(np.diag(s.hth_diagonal(3)) + 0.1 * Lcal) for s in (ours, rand)]
        wins += lam[0] >= lam[1]
    assert wins >= 18
