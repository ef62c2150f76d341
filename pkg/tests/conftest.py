"""Shared generators for signed graphs and synthetic clouds."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcgsp.graph import WeightedGraph
from pcgsp.pcio import normalize_diagonal
from pcgsp.synthetic import make_cloud

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_signed_graph(seed, n=30, p=0.2, negative=0.4, loop_margin=0.1, connected=True):
    """Random signed graph whose generalized Laplacian is positive definite.

    Self-loops of ``2 sum |w| + loop_margin`` per node dominate the signed degrees.
    """
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    mask = rng.random(iu.size) < p
    if connected:
        path = ju == iu + 1
        mask |= path
    i, j = iu[mask], ju[mask]
    w = rng.uniform(0.1, 1.0, i.size) * np.where(rng.random(i.size) < negative, -1.0, 1.0)
    loops = np.full(n, loop_margin)
    np.add.at(loops, i, 2 * np.abs(w))
    np.add.at(loops, j, 2 * np.abs(w))
    return WeightedGraph(n, i, j, w, loops)


def random_balanced_graph(seed, n=30, p=0.2, loop_scale=1.0):
    """Connected balanced signed graph with diagonally dominant self-loops and its coloring."""
    rng = np.random.default_rng(seed)
    color = rng.choice([-1, 1], size=n)
    iu, ju = np.triu_indices(n, 1)
    mask = (rng.random(iu.size) < p) | (ju == iu + 1)
    i, j = iu[mask], ju[mask]
    w = rng.uniform(0.1, 1.0, i.size) * color[i] * color[j]
    loops = rng.uniform(0.0, loop_scale, n) + 0.1
    np.add.at(loops, i, 2 * np.abs(w))
    np.add.at(loops, j, 2 * np.abs(w))
    return WeightedGraph(n, i, j, w, loops), color


def random_positive_graph(seed, n=20, p=0.3):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    mask = (rng.random(iu.size) < p) | (ju == iu + 1)
    return WeightedGraph(n, iu[mask], ju[mask], rng.uniform(0.1, 1.0, mask.sum()))


def unit_extent_cloud(shape, n, sigma, seed):
    """Synthetic cloud scaled to a unit bounding-box diagonal, then noised."""
    clean, _ = make_cloud(shape, n, 0.0, seed)
    clean = normalize_diagonal(clean).points
    noisy = clean + np.random.default_rng(seed + 101).normal(0.0, sigma, clean.shape)
    return clean, noisy


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
