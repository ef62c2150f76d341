"""Surface normals: PCA estimates, cross-product normals, MST orientation and linearization."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import minimum_spanning_tree

from .errors import DegenerateGeometryError
from .graph import knn_edges
from .pcio import PointCloud, knn_search

COLLINEAR_TOL = 1e-12


def _coords(cloud_or_points):
    if isinstance(cloud_or_points, PointCloud):
        return cloud_or_points.points
    return np.asarray(cloud_or_points, dtype=float)


def _scale(points):
    if len(points) < 2:
        return 1.0
    ext = np.ptp(points, axis=0).max()
    return ext if ext > 0 else 1.0


def pca_normals(cloud, k):
    """Unit normal per point from the smallest principal axis of its k-NN neighbourhood.

    The neighbourhood includes the point itself. Normals are not oriented.

    Raises
    ------
    DegenerateGeometryError
        When a neighbourhood spans fewer than two directions.
    """
    pts = _coords(cloud)
    n = len(pts)
    if k < 2:
        raise ValueError("k must be at least 2")
    k = min(k, n - 1)
    if k < 2:
        raise DegenerateGeometryError("need at least 3 points to fit a plane")
    nbrs = knn_search(pts, k)
    hood = np.concatenate([pts[:, None, :], pts[nbrs]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    vals, vecs = np.linalg.eigh(cov)
    tol = 1e-12 * np.maximum(vals[:, 2], np.finfo(float).tiny) + 1e-300
    bad = np.flatnonzero(vals[:, 1] <= tol)
    if bad.size:
        raise DegenerateGeometryError(f"neighbourhood of point {int(bad[0])} has rank < 2")
    return vecs[:, :, 0] / np.linalg.norm(vecs[:, :, 0], axis=1, keepdims=True)


# ------------------------------------------------------------ pair selection


@dataclass(frozen=True)
class BluePairSelection:
    """Neighbour pair (k, l) per node with the geometry entering the stability bound."""

    nodes: np.ndarray
    k: np.ndarray
    l: np.ndarray
    dist: np.ndarray
    beta: np.ndarray

    @property
    def min_geom(self):
        return float(np.min(self.dist**2 * np.sin(self.beta) ** 2))


def _cross(a, b):
    """Cross product over the last axis; avoids np.cross overhead on small arrays."""
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _angle(a, b):
    cross = np.linalg.norm(_cross(a, b), axis=-1)
    return np.arctan2(cross, np.sum(a * b, axis=-1))


def select_blue_pair(i, candidates, coords):
    """Best neighbour pair for the cross-product normal at node ``i``.

    Maximizes ``||p_i - p_k||^2 sin^2(beta)`` over ordered candidate pairs,
    where beta is the angle between ``p_i - p_k`` and ``p_k - p_l``; ties go
    to the lexicographically smallest (k, l).

    Returns
    -------
    (k, l, dist, beta)
    """
    coords = np.asarray(coords, dtype=float)
    cand = np.array(sorted(set(int(c) for c in candidates) - {int(i)}), dtype=np.int64)
    if cand.size < 2:
        raise DegenerateGeometryError(f"node {i} has fewer than 2 candidate neighbours")
    p = coords[i]
    K, Lc = np.meshgrid(cand, cand, indexing="ij")
    u = p - coords[K]
    v = coords[K] - coords[Lc]
    cross2 = np.sum(_cross(u, v) ** 2, axis=-1)
    vv = np.sum(v * v, axis=-1)
    scale2 = _scale(coords[np.r_[i, cand]]) ** 2
    valid = (K != Lc) & (np.sqrt(cross2) >= COLLINEAR_TOL * scale2)
    if not valid.any():
        raise DegenerateGeometryError(f"all candidate pairs are collinear with node {i}")
    # ||u||^2 sin^2(beta) = ||u x v||^2 / ||v||^2
    score = np.where(valid, cross2 / np.where(vv > 0, vv, 1.0), -np.inf)
    flat = int(np.argmax(score.ravel()))  # first maximum in row-major (k, l) order
    a, b = np.unravel_index(flat, score.shape)
    k, l = int(cand[a]), int(cand[b])
    dist = float(np.linalg.norm(p - coords[k]))
    beta = float(_angle(p - coords[k], coords[k] - coords[l]))
    return k, l, dist, beta


def select_pairs(nodes, candidate_lists, coords, fallback_pool=None):
    """Run :func:`select_blue_pair` for each node.

    Nodes with fewer than two usable candidates fall back to their two nearest
    points of ``fallback_pool`` (growing the search until a non-collinear pair exists).
    """
    coords = np.asarray(coords, dtype=float)
    ks, ls, ds, bs = [], [], [], []
    pool = None if fallback_pool is None else np.asarray(fallback_pool, dtype=np.int64)
    for i, cand in zip(nodes, candidate_lists):
        try:
            k, l, d, b = select_blue_pair(i, cand, coords)
        except DegenerateGeometryError:
            if pool is None:
                raise
            k, l, d, b = _fallback_pair(i, pool, coords)
        ks.append(k)
        ls.append(l)
        ds.append(d)
        bs.append(b)
    return BluePairSelection(np.asarray(nodes, dtype=np.int64), np.array(ks, dtype=np.int64),
                             np.array(ls, dtype=np.int64), np.array(ds), np.array(bs))


def _fallback_pair(i, pool, coords):
    pool = pool[pool != i]
    d2 = np.sum((coords[pool] - coords[i]) ** 2, axis=1)
    order = pool[np.lexsort((pool, d2))]
    for take in range(2, order.size + 1):
        try:
            return select_blue_pair(i, order[:take], coords)
        except DegenerateGeometryError:
            continue
    raise DegenerateGeometryError(f"no non-collinear neighbour pair for node {i}")


def cross_product_normal(p_i, p_k, p_l):
    """Unit normal of the plane through three points plus its affine form in ``p_i``.

    Returns
    -------
    n : (3,) unit vector along ``(p_i - p_k) x (p_k - p_l)``
    C : (3, 3) with ``C p_i + d`` equal to that cross product
    d : (3,)
    """
    p_i, p_k, p_l = (np.asarray(x, dtype=float) for x in (p_i, p_k, p_l))
    xk, yk, zk = p_k
    xl, yl, zl = p_l
    C = np.array([[0.0, zk - zl, yl - yk],
                  [zl - zk, 0.0, xk - xl],
                  [yk - yl, xl - xk, 0.0]])
    d = -C @ p_k
    raw = C @ p_i + d
    norm = np.linalg.norm(raw)
    scale = max(np.ptp(np.array([p_i, p_k, p_l]), axis=0).max(), np.finfo(float).tiny)
    if norm < COLLINEAR_TOL * scale**2:
        raise DegenerateGeometryError("points are collinear")
    return raw / norm, C, d


# --------------------------------------------------------------- orientation


def orient_mst(normals, coords, k=8, root=0):
    """Propagate a consistent orientation along a minimum spanning tree.

    The tree spans the k-NN graph weighted by ``1 - |n_i . n_j|``. Each
    component is traversed from its smallest node (``root`` for its own
    component); a child is flipped when its dot product with the parent is negative.

    Returns
    -------
    oriented : (n, 3) normals
    alpha : (n,) +1 or -1, the flip applied to each input normal
    """
    normals = np.asarray(normals, dtype=float)
    coords = _coords(coords)
    n = len(normals)
    alpha = np.ones(n, dtype=np.int64)
    if n < 2:
        return normals.copy(), alpha
    T = _mst(normals, coords, k)
    T = (T + T.T).tocsr()
    oriented = normals.copy()
    seen = np.zeros(n, dtype=bool)
    starts = [root] + [x for x in range(n) if x != root]
    for start in starts:
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in T.indices[T.indptr[u]:T.indptr[u + 1]]:
                if seen[v]:
                    continue
                seen[v] = True
                if oriented[u] @ oriented[v] < 0:
                    oriented[v] = -oriented[v]
                    alpha[v] = -1
                queue.append(v)
    return oriented, alpha


def _mst(normals, coords, k):
    n = len(normals)
    i, j = knn_edges(coords, min(k, n - 1))
    # strictly positive weights: the sparse MST treats explicit zeros as missing edges
    w = 1.0 - np.abs(np.sum(normals[i] * normals[j], axis=1)) + 1e-12
    return minimum_spanning_tree(sp.coo_matrix((w, (i, j)), shape=(n, n)).tocsr())


def mst_edges(normals, coords, k=8):
    """Edges (i, j) of the orientation tree used by :func:`orient_mst`."""
    T = _mst(np.asarray(normals, dtype=float), _coords(coords), k).tocoo()
    return T.row, T.col


# ------------------------------------------------------------- linearization


@dataclass(frozen=True)
class NormalLinearization:
    """Affine model ``n = A_bar p + b_bar`` of the normals around a linearization point.

    ``p`` is point-interleaved ``[x_0, y_0, z_0, x_1, ...]`` over the variable
    points; ``n`` is component-blocked ``[n_x; n_y; n_z]`` over the nodes.
    ``C``, ``d`` hold the per-node cross-product forms in the node's own
    coordinates, ``A_blocks`` / ``b_blocks`` their normalized, oriented versions.
    """

    C: np.ndarray
    d: np.ndarray
    alpha: np.ndarray
    norm_at_lin: np.ndarray
    A_blocks: np.ndarray
    b_blocks: np.ndarray
    A_bar: sp.csr_matrix
    b_bar: np.ndarray
    pairs: BluePairSelection

    @property
    def node_count(self):
        return self.alpha.shape[0]

    @property
    def A_x(self):
        return self.A_bar[: self.node_count]

    @property
    def A_y(self):
        return self.A_bar[self.node_count: 2 * self.node_count]

    @property
    def A_z(self):
        return self.A_bar[2 * self.node_count:]

    @property
    def min_geom(self):
        return self.pairs.min_geom

    def evaluate(self, p):
        """Normals (n, 3) predicted by the affine model at interleaved coordinates ``p``."""
        return (self.A_bar @ np.asarray(p, dtype=float).ravel() + self.b_bar).reshape(3, -1).T


def _cross_forms(nodes, pairs, coords):
    C = np.empty((len(nodes), 3, 3))
    d = np.empty((len(nodes), 3))
    raw = np.empty((len(nodes), 3))
    for t, i in enumerate(nodes):
        _, C[t], d[t] = cross_product_normal(coords[i], coords[pairs.k[t]], coords[pairs.l[t]])
        raw[t] = C[t] @ coords[i] + d[t]
    return C, d, raw


def cross_orientation(nodes, pairs, coords, reference_normals):
    """Sign per node that turns its cross-product normal toward ``reference_normals[node]``.

    Zero dot products (cross normal orthogonal to the reference) map to +1.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    coords = np.asarray(coords, dtype=float)
    u = coords[nodes] - coords[pairs.k]
    v = coords[pairs.k] - coords[pairs.l]
    dots = np.sum(np.cross(u, v) * np.asarray(reference_normals, dtype=float)[nodes], axis=1)
    return np.where(dots < 0, -1, 1).astype(np.int64)


def linearize(red_set, pairs, coords_in, alphas):
    """Per-node linearization in the node's own coordinates.

    Neighbours k and l are treated as constants, so ``A_bar`` is block
    diagonal: row t of ``A_x`` is nonzero only in columns ``3t..3t+2``.
    """
    nodes = np.asarray(red_set, dtype=np.int64)
    coords = np.asarray(coords_in, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    C, d, raw = _cross_forms(nodes, pairs, coords)
    norm = np.linalg.norm(raw, axis=1)
    A_blocks = C * (alphas / norm)[:, None, None]
    b_blocks = d * (alphas / norm)[:, None]
    N = len(nodes)
    rows = (np.arange(3)[:, None, None] * N + np.arange(N)[None, :, None]).repeat(3, axis=2)
    cols = np.broadcast_to(3 * np.arange(N)[None, :, None] + np.arange(3)[None, None, :], (3, N, 3))
    vals = np.transpose(A_blocks, (1, 0, 2))  # (component, node, coord)
    A_bar = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * N, 3 * N))
    b_bar = b_blocks.T.ravel()
    return NormalLinearization(C, d, alphas, norm, A_blocks, b_blocks, A_bar, b_bar, pairs)


def _skew(v):
    """Matrix ``[v]_x`` with ``[v]_x w = v x w``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def linearize_coupled(pairs, coords_in, alphas):
    """First-order expansion of every normal in all three of its points.

    Each node's normal ``alpha (p_i - p_k) x (p_k - p_l) / N`` is expanded
    to first order in ``p_i``, ``p_k`` and ``p_l`` with alpha and N frozen.
    Variables are all points of ``coords_in`` (interleaved); nodes are
    ``pairs.nodes``.
    """
    nodes = pairs.nodes
    coords = np.asarray(coords_in, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    C, d, raw = _cross_forms(nodes, pairs, coords)
    norm = np.linalg.norm(raw, axis=1)
    N, P = len(nodes), len(coords)
    rows, cols, vals = [], [], []
    b_blocks = np.empty((N, 3))
    for t, i in enumerate(nodes):
        k, l = pairs.k[t], pairs.l[t]
        u0 = coords[i] - coords[k]
        v0 = coords[k] - coords[l]
        s = alphas[t] / norm[t]
        # u x v ~ u x v0 + u0 x v - u0 x v0, with u = p_i - p_k and v = p_k - p_l
        jac = {i: -_skew(v0), k: _skew(v0) + _skew(u0), l: -_skew(u0)}
        for point, block in jac.items():
            for comp in range(3):
                rows.extend([comp * N + t] * 3)
                cols.extend(range(3 * point, 3 * point + 3))
                vals.extend((s * block[comp]).tolist())
        b_blocks[t] = -s * np.cross(u0, v0)
    A_bar = sp.csr_matrix((vals, (rows, cols)), shape=(3 * N, 3 * P))
    A_bar.sum_duplicates()
    A_blocks = C * (alphas / norm)[:, None, None]
    return NormalLinearization(C, d, alphas, norm, A_blocks, b_blocks, A_bar.tocsr(),
                               b_blocks.T.ravel(), pairs)
