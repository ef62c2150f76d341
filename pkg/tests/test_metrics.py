import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from conftest import random_positive_graph, random_signed_graph
from pcgsp.balance import drop_inconsistent_baseline, greedy_balance
from pcgsp.errors import ContractError
from pcgsp.graph import WeightedGraph, laplacian
from pcgsp.metrics import (MetricsConfig, balancing_scores, c2c, c2p, deltacon_similarity,
                           lambda_min_report, relative_error)
from pcgsp.pcio import PointCloud
from pcgsp.sampling import SamplingSet
from pcgsp.synthetic import plane, sphere


def dense_dcs(gA, gB, eps):
    def sim(g):
        A = g.adjacency().toarray()
        D = np.diag(np.abs(A).sum(axis=1))
        return np.clip(np.linalg.inv(np.eye(g.n) + eps**2 * D - eps * A), 0, None)
    return 1.0 / (1.0 + np.sqrt(np.sum((np.sqrt(sim(gA)) - np.sqrt(sim(gB))) ** 2)))


# ------------------------------------------------------------------ C2C / C2P


def test_c2c_identical_clouds():
    pts = sphere(100)
    assert c2c(pts, pts) == 0.0


def test_c2c_single_points():
    assert c2c([[0, 0, 0]], [[3, 4, 0]]) == 5.0


def test_c2c_outlier():
    gt = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    rec = np.vstack([gt, [[0, 0, 9]]])
    assert c2c(gt, rec) == pytest.approx(2.25)


def test_c2c_rejects_empty_cloud():
    with pytest.raises(ValueError):
        c2c(np.zeros((0, 3)), np.zeros((1, 3)))


def test_c2p_identical_clouds():
    pts = sphere(200)
    assert c2p(pts, pts) == pytest.approx(0.0, abs=1e-12)


def test_c2p_point_above_plane():
    rec = plane(400, jitter=0.0)
    gt = rec + [0, 0, 0.1]
    # planes of either cloud are horizontal, so both directed means equal the offset
    assert c2p(gt, rec) == pytest.approx(0.1, rel=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_c2p_never_exceeds_c2c(seed):
    rng = np.random.default_rng(seed)
    a = sphere(150, seed=seed)
    b = a + rng.normal(0, 0.2, a.shape)
    assert c2p(a, b) <= c2c(a, b) + 1e-12


@given(st.integers(0, 10**6))
def test_distances_ignore_point_order(seed):
    rng = np.random.default_rng(seed)
    a = sphere(60, seed=seed % 97)
    b = a + rng.normal(0, 0.1, a.shape)
    pa, pb = rng.permutation(60), rng.permutation(60)
    assert c2c(a[pa], b[pb]) == pytest.approx(c2c(a, b), rel=1e-12)
    assert c2p(a[pa], b[pb]) == pytest.approx(c2p(a, b), rel=1e-9)


def test_metrics_config_validation():
    with pytest.raises(ValueError):
        MetricsConfig(dcs_epsilon=0.0)
    with pytest.raises(ValueError):
        MetricsConfig(c2p_normal_k=1)


def test_distances_accept_point_clouds():
    pts = sphere(50)
    assert c2c(PointCloud(pts), PointCloud(pts)) == 0.0


# ------------------------------------------------------------------ relative error


def test_relative_error_examples():
    L = laplacian(random_signed_graph(0, n=15))
    assert relative_error(L, L) == 0.0
    assert relative_error(L, L / 2) == pytest.approx(0.5)


@given(st.integers(0, 10**6))
def test_relative_error_matches_entrywise_sum(seed):
    L = laplacian(random_signed_graph(seed, n=20)).toarray()
    L_B = laplacian(drop_inconsistent_baseline(random_signed_graph(seed, n=20), seed)[0]).toarray()
    ref = np.sqrt(np.sum((L - L_B) ** 2)) / np.sqrt(np.sum(L**2))
    assert relative_error(L, L_B) == pytest.approx(ref, abs=1e-12)


def test_relative_error_rejects_zero_matrix():
    with pytest.raises(ValueError):
        relative_error(sp.csr_matrix((3, 3)), sp.identity(3))


# ------------------------------------------------------------------ DELTACON


def test_dcs_identical_graphs():
    g = random_signed_graph(1, n=20)
    assert deltacon_similarity(g, g) == 1.0


def test_dcs_empty_graphs():
    e = WeightedGraph(5, [], [], [])
    assert deltacon_similarity(e, e) == 1.0


@given(st.integers(0, 10**6))
def test_dcs_matches_dense_inverse(seed):
    gA = random_signed_graph(seed, n=20)
    gB = drop_inconsistent_baseline(gA, seed)[0]
    eps = 0.05
    got = deltacon_similarity(gA, gB, MetricsConfig(dcs_epsilon=eps))
    assert got == pytest.approx(dense_dcs(gA, gB, eps), abs=1e-8)
    assert 0 < got <= 1
    assert got == pytest.approx(deltacon_similarity(gB, gA, MetricsConfig(dcs_epsilon=eps)), abs=1e-12)


def test_dcs_large_graph_uses_sparse_path():
    gA = random_positive_graph(2, n=520, p=0.01)
    gB = gA.drop_edges(np.arange(gA.edge_count) % 7 != 0)
    assert 0 < deltacon_similarity(gA, gB) < 1


def test_dcs_rejects_indefinite_system():
    # complete graph on 10 nodes: 1 + eps^2 (n-1) - eps (n-1) < 0 at eps = 0.5
    i, j = np.triu_indices(10, 1)
    g = WeightedGraph(10, i, j, np.ones(i.size))
    with pytest.raises(ContractError):
        deltacon_similarity(g, g, MetricsConfig(dcs_epsilon=0.5))


def test_dcs_rejects_node_count_mismatch():
    with pytest.raises(ValueError):
        deltacon_similarity(WeightedGraph(2, [], [], []), WeightedGraph(3, [], [], []))


def balancing_corpus(balancer):
    scores = []
    for seed in range(30):
        g = random_signed_graph(seed, n=40, negative=0.3)
        r, d = balancing_scores(g, balancer(g, seed))
        assert np.isfinite(r)
        scores.append((r, d))
    return scores


def greedy_graph(g, seed):
    return greedy_balance(g, seed=seed).graph


def naive_graph(g, seed):
    return drop_inconsistent_baseline(g, seed)[0]


def test_lower_error_goes_with_higher_similarity_for_edge_deletion():
    res, sims = zip(*balancing_corpus(naive_graph))
    assert spearmanr(res, sims).statistic < 0


@pytest.mark.xfail(strict=True, reason="greedy outputs reweight edges by 2w, which raises the Frobenius error "
                   "while keeping DELTACON similarity high; pooled with deletion-only outputs the rank "
                   "correlation turns positive")
def test_lower_error_goes_with_higher_similarity():
    res, sims = zip(*(balancing_corpus(greedy_graph) + balancing_corpus(naive_graph)))
    assert spearmanr(res, sims).statistic < 0


# ------------------------------------------------------------------ lambda_min


def test_lambda_min_full_sampling_is_at_least_one():
    L = laplacian(random_positive_graph(0, n=20))
    full = SamplingSet(np.arange(20), 20)
    assert lambda_min_report(full, L, 0.5, group_size=1) >= 1 - 1e-12


def test_lambda_min_empty_sampling_is_zero():
    L = laplacian(random_positive_graph(0, n=20))
    assert lambda_min_report(SamplingSet([], 20), L, 0.5, group_size=1) == pytest.approx(0, abs=1e-12)


@pytest.mark.parametrize("n", [40, 200])
def test_lambda_min_matches_dense_oracle(n):
    rng = np.random.default_rng(n)
    Lcal = laplacian(random_signed_graph(n, n=3 * n, p=0.02), "generalized")
    s = SamplingSet(np.sort(rng.choice(n, n // 3, replace=False)), n)
    B = np.diag(s.hth_diagonal(3)) + 0.1 * Lcal.toarray()
    assert lambda_min_report(s, Lcal, 0.1) == pytest.approx(np.linalg.eigvalsh(B)[0], abs=1e-7)


def test_lambda_min_rejects_mismatched_dimensions():
    with pytest.raises(ValueError):
        lambda_min_report(SamplingSet([0], 4), sp.identity(5), 0.1)
