"""Signed-graph balancing: two-coloring checks, PSD-preserving edge removal and the greedy balancer."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack
from numba import types
from numba.typed import Dict, List
from scipy.sparse.csgraph import connected_components

from .errors import ContractError
from .graph import GmrfModel, WeightedGraph, gmrf_apply_covariance, laplacian

PSD_GAP_LIMIT = 200
DENSE_COVARIANCE_LIMIT = 4500


def is_balanced(g):
    """Two-coloring with every edge consistent, or None if the graph is unbalanced.

    Colors are propagated by BFS sign parity from the smallest node of each
    component, which gets color +1.
    """
    color = np.zeros(g.n, dtype=np.int64)
    adj = [[] for _ in range(g.n)]
    for i, j, w in zip(g.rows.tolist(), g.cols.tolist(), g.weights.tolist()):
        s = 1 if w > 0 else -1
        adj[i].append((j, s))
        adj[j].append((i, s))
    for start in range(g.n):
        if color[start]:
            continue
        color[start] = 1
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v, s in adj[u]:
                want = color[u] * s
                if color[v] == 0:
                    color[v] = want
                    queue.append(v)
                elif color[v] != want:
                    return None
    return color


def edge_consistency(coloring, i, j, w):
    """``+1`` if edge (i, j) with weight ``w`` is consistent under ``coloring``, else ``-1``."""
    if w == 0:
        raise ValueError("edge weight must be nonzero")
    return int(coloring[i] * coloring[j] * np.sign(w))


def remove_negative_edge(g, j, i, k, coloring):
    """Delete negative edge (j, i) and add ``2 w_ji`` to edges (k, j) and (k, i).

    ``k`` must have the opposite color to ``i`` and ``j``. Missing edges are
    created from weight zero. The change keeps ``L - L_B`` positive semidefinite.
    """
    edges = g.edge_dict()
    key = (min(i, j), max(i, j))
    w = edges.get(key)
    if w is None or w >= 0:
        raise ContractError(f"edge {key} is not a negative edge")
    if coloring[k] == coloring[i] or coloring[k] == coloring[j]:
        raise ContractError("k must have the opposite color to i and j")
    del edges[key]
    for other in (j, i):
        e = (min(k, other), max(k, other))
        edges[e] = edges.get(e, 0.0) + 2.0 * w
    return WeightedGraph.from_edge_dict(g.n, edges, g.self_loops)


def trace_objective(L_B, gmrf, cache=None):
    """``Tr(L_B Sigma)`` with covariance columns from :func:`gmrf_apply_covariance`.

    ``cache`` (a dict) memoizes columns between calls on the same model.
    """
    L_B = sp.csr_matrix(L_B)
    if L_B.shape != gmrf.precision.shape:
        raise ValueError("dimension mismatch")
    cache = {} if cache is None else cache
    total = 0.0
    n = L_B.shape[0]
    for i in range(n):
        lo, hi = L_B.indptr[i], L_B.indptr[i + 1]
        if lo == hi:
            continue
        col = cache.get(i)
        if col is None:
            e = np.zeros(n)
            e[i] = 1.0
            col = gmrf_apply_covariance(gmrf, e, tol=1e-12)
            cache[i] = col
        total += L_B.data[lo:hi] @ col[L_B.indices[lo:hi]]
    return float(total)


# ------------------------------------------------------------ greedy kernel


@numba.njit(cache=True)
def _dist(sigma, a, b):
    return sigma[a, a] + sigma[b, b] - 2.0 * sigma[a, b]


@numba.njit(cache=True)
def _pick_k(j, x, want, indptr, indices, in_s, color, comp, stamp, mark, buf):
    """Uniform random opposite-color S node near {x, j}: 1 hop, then 2 hops, then the component."""
    n = in_s.shape[0]
    for hops in range(2):
        cnt = 0
        stamp[0] += 1
        s = stamp[0]
        for root in (j, x):
            for p in range(indptr[root], indptr[root + 1]):
                a = indices[p]
                if mark[a] != s:
                    mark[a] = s
                    if in_s[a] and color[a] == want:
                        buf[cnt] = a
                        cnt += 1
                if hops == 1:
                    for q in range(indptr[a], indptr[a + 1]):
                        b = indices[q]
                        if mark[b] != s:
                            mark[b] = s
                            if in_s[b] and color[b] == want:
                                buf[cnt] = b
                                cnt += 1
        if cnt > 0:
            return buf[np.random.randint(cnt)]
    cnt = 0
    for a in range(n):
        if in_s[a] and color[a] == want and comp[a] == comp[j]:
            buf[cnt] = a
            cnt += 1
    if cnt == 0:
        return -1
    return buf[np.random.randint(cnt)]


@numba.njit(cache=True)
def _term(j, x, w, beta, sigma, indptr, indices, in_s, color, comp, stamp, mark, buf):
    """Objective change and chosen k for handling edge (j, x) when j takes color ``beta``.

    Returns (delta, k) with k = -2 for a consistent edge, -3 for a removed
    positive edge, -1 for an impossible negative removal.
    """
    if beta * color[x] * w > 0:
        return 0.0, -2
    if w > 0:
        return -w * _dist(sigma, j, x), -3
    k = _pick_k(j, x, -beta, indptr, indices, in_s, color, comp, stamp, mark, buf)
    if k < 0:
        return -np.inf, -1
    return -w * _dist(sigma, j, x) + 2.0 * w * (_dist(sigma, k, j) + _dist(sigma, k, x)), k


@numba.njit(cache=True)
def _recompute(j, n, indptr, indices, weights, sigma, in_s, color, comp, stamp, mark, buf, delta, choice):
    for bi in range(2):
        beta = 1 if bi == 0 else -1
        total = 0.0
        for p in range(indptr[j], indptr[j + 1]):
            x = indices[p]
            if not in_s[x]:
                continue
            d, k = _term(j, x, weights[p], beta, sigma, indptr, indices, in_s, color, comp, stamp, mark, buf)
            total += d
            choice[(j * 2 + bi) * n + x] = k
        delta[j, bi] = total


@numba.njit(cache=True)
def _greedy_kernel(n, indptr, indices, weights, sigma, comp, seed, start_order):
    np.random.seed(seed)
    in_s = np.zeros(n, dtype=np.bool_)
    in_c = np.zeros(n, dtype=np.bool_)
    color = np.zeros(n, dtype=np.int64)
    delta = np.zeros((n, 2))  # column 0: beta=+1, column 1: beta=-1
    stamp = np.zeros(1, dtype=np.int64)
    mark = np.zeros(n, dtype=np.int64)
    buf = np.zeros(n, dtype=np.int64)
    ncomp = comp.max() + 1
    comp_colors = np.zeros((ncomp, 2), dtype=np.int64)

    cur = Dict.empty(key_type=types.int64, value_type=types.float64)
    for a in range(n):
        for p in range(indptr[a], indptr[a + 1]):
            b = indices[p]
            if a < b:
                cur[a * n + b] = weights[p]
    choice = Dict.empty(key_type=types.int64, value_type=types.int64)

    # event log: (op, a, b, new weight); op counts PSD-preserving operations
    ev_op = List.empty_list(types.int64)
    ev_a = List.empty_list(types.int64)
    ev_b = List.empty_list(types.int64)
    ev_w = List.empty_list(types.float64)
    op = 0

    next_start = 0
    remaining = n
    while remaining > 0:
        # seed a new component with a random unvisited node
        while in_s[start_order[next_start]]:
            next_start += 1
        root = start_order[next_start]
        in_s[root] = True
        color[root] = 1
        comp_colors[comp[root], 0] += 1
        remaining -= 1
        for p in range(indptr[root], indptr[root + 1]):
            x = indices[p]
            if not in_s[x] and not in_c[x]:
                in_c[x] = True
        for j in range(n):
            if in_c[j] and comp[j] == comp[root]:
                _recompute(j, n, indptr, indices, weights, sigma, in_s, color, comp, stamp, mark, buf, delta, choice)
        while True:
            best_j = -1
            best_b = 0
            best = -np.inf
            for j in range(n):
                if not in_c[j]:
                    continue
                for bi in range(2):
                    if delta[j, bi] > best:
                        best = delta[j, bi]
                        best_j = j
                        best_b = bi
            if best_j < 0:
                break
            j = best_j
            beta = 1 if best_b == 0 else -1
            # positive inconsistent edges first, then negative ones by ascending neighbor
            for sign_pass in range(2):
                for p in range(indptr[j], indptr[j + 1]):
                    x = indices[p]
                    if not in_s[x]:
                        continue
                    w = weights[p]
                    if beta * color[x] * w > 0:
                        continue
                    if (sign_pass == 0) != (w > 0):
                        continue
                    key = min(j, x) * n + max(j, x)
                    cur.pop(key)
                    op += 1
                    ev_op.append(op)
                    ev_a.append(min(j, x))
                    ev_b.append(max(j, x))
                    ev_w.append(0.0)
                    if w < 0:
                        k = choice[(j * 2 + best_b) * n + x]
                        for other in (j, x):
                            e = min(k, other) * n + max(k, other)
                            nw = cur.get(e, 0.0) + 2.0 * w
                            cur[e] = nw
                            ev_op.append(op)
                            ev_a.append(min(k, other))
                            ev_b.append(max(k, other))
                            ev_w.append(nw)
            in_c[j] = False
            in_s[j] = True
            color[j] = beta
            remaining -= 1
            ci = comp[j]
            was_mono = comp_colors[ci, 0] == 0 or comp_colors[ci, 1] == 0
            comp_colors[ci, 0 if beta == 1 else 1] += 1
            now_bi = comp_colors[ci, 0] > 0 and comp_colors[ci, 1] > 0
            for p in range(indptr[j], indptr[j + 1]):
                x = indices[p]
                if not in_s[x] and not in_c[x]:
                    in_c[x] = True
                    _recompute(x, n, indptr, indices, weights, sigma, in_s, color, comp, stamp, mark, buf, delta, choice)
                elif in_c[x] and not (was_mono and now_bi):
                    # only the new edge (x, j) enters x's objective terms
                    for bi in range(2):
                        b2 = 1 if bi == 0 else -1
                        d, k = _term(x, j, weights[p], b2, sigma, indptr, indices, in_s, color, comp, stamp, mark, buf)
                        delta[x, bi] += d
                        choice[(x * 2 + bi) * n + j] = k
            if was_mono and now_bi:
                for x in range(n):
                    if in_c[x] and comp[x] == ci:
                        _recompute(x, n, indptr, indices, weights, sigma, in_s, color, comp, stamp, mark, buf, delta, choice)

    m = len(cur)
    ra = np.empty(m, dtype=np.int64)
    rb = np.empty(m, dtype=np.int64)
    rw = np.empty(m)
    t = 0
    for key, w in cur.items():
        ra[t] = key // n
        rb[t] = key % n
        rw[t] = w
        t += 1
    ne = len(ev_op)
    events = np.empty((ne, 4))
    for t in range(ne):
        events[t, 0] = ev_op[t]
        events[t, 1] = ev_a[t]
        events[t, 2] = ev_b[t]
        events[t, 3] = ev_w[t]
    return color, ra, rb, rw, events


@dataclass(frozen=True)
class BalancedGraphResult:
    """Balanced approximation of a signed graph.

    ``L_B`` is the combinatorial Laplacian of ``graph``; ``Lcal_B`` adds the
    (unchanged) self-loops. ``psd_gap_mineig`` is the smallest eigenvalue of
    ``L - L_B`` for graphs small enough for a dense check, else None.
    ``events`` lists weight changes as rows (operation id, i, j, new weight).
    """

    graph: WeightedGraph
    coloring: np.ndarray
    L_B: sp.csr_matrix
    Lcal_B: sp.csr_matrix
    psd_gap_mineig: float | None
    events: np.ndarray


def dense_covariance(Lcal, delta):
    Lcal = Lcal.toarray() if sp.issparse(Lcal) else np.asarray(Lcal, dtype=float)
    P = Lcal + delta * np.eye(Lcal.shape[0])
    chol, info = lapack.dpotrf((P + P.T) / 2, lower=False)
    if info != 0:
        raise np.linalg.LinAlgError("precision matrix is not positive definite")
    inv, info = lapack.dpotri(chol, lower=False)
    if info != 0:
        raise np.linalg.LinAlgError("precision matrix is singular")
    # potri fills the upper triangle only
    return np.triu(inv) + np.triu(inv, 1).T


def greedy_balance(g, gmrf=None, seed=0, delta=1e-4, on_event=None):
    """Greedy balancing that keeps ``L - L_B`` positive semidefinite.

    Parameters
    ----------
    g : WeightedGraph
        Signed graph; its generalized Laplacian is the GMRF precision minus delta I
        unless ``gmrf`` is given.
    gmrf : GmrfModel, optional
    seed : int
        Seeds the start node of each component and the choice of k.
    on_event : callable, optional
        Called as ``on_event(partial_graph)`` after every edge removal or
        triangle update, in order.
    """
    n = g.n
    if gmrf is None:
        gmrf = GmrfModel.from_laplacian(laplacian(g, "generalized"), delta)
    if n > DENSE_COVARIANCE_LIMIT:
        raise ContractError(f"balancing uses a dense covariance; dimension {n} exceeds "
                            f"{DENSE_COVARIANCE_LIMIT} (use smaller sub-clouds)")
    sigma = dense_covariance(gmrf.precision - gmrf.delta * sp.identity(n), gmrf.delta)
    W = g.adjacency().tocsr()
    W.sort_indices()
    _, comp = connected_components(W, directed=False)
    rng = np.random.default_rng(seed)
    start_order = rng.permutation(n).astype(np.int64)
    color, ra, rb, rw, events = _greedy_kernel(
        n, W.indptr.astype(np.int64), W.indices.astype(np.int64), W.data.astype(float),
        sigma, comp.astype(np.int64), int(seed) % (2**32), start_order)
    keep = rw != 0
    g_B = WeightedGraph(n, ra[keep], rb[keep], rw[keep], g.self_loops)
    if on_event is not None:
        replay_events(g, events, on_event)
    L = laplacian(g)
    L_B = laplacian(g_B)
    gap = None
    if n <= PSD_GAP_LIMIT:
        gap = float(np.linalg.eigvalsh((L - L_B).toarray())[0])
    return BalancedGraphResult(g_B, color, L_B, laplacian(g_B, "generalized"), gap, events)


def replay_events(g, events, callback):
    """Rebuild intermediate graphs from an event log, calling ``callback`` after each operation."""
    edges = g.edge_dict()
    ops = events[:, 0].astype(np.int64) if len(events) else np.zeros(0, dtype=np.int64)
    for t in range(len(events)):
        a, b, w = int(events[t, 1]), int(events[t, 2]), float(events[t, 3])
        if w == 0.0:
            edges.pop((a, b), None)
        else:
            edges[(a, b)] = w
        if t + 1 == len(events) or ops[t + 1] != ops[t]:
            callback(WeightedGraph.from_edge_dict(g.n, edges, g.self_loops))


def drop_inconsistent_baseline(g, seed=0):
    """Naive balancing: BFS spanning-tree coloring, then delete every inconsistent edge."""
    adj = g.adjacency().tocsr()
    rng = np.random.default_rng(seed)
    color = np.zeros(g.n, dtype=np.int64)
    for start in rng.permutation(g.n):
        if color[start]:
            continue
        color[start] = 1
        queue = deque([int(start)])
        while queue:
            u = queue.popleft()
            for p in range(adj.indptr[u], adj.indptr[u + 1]):
                v = adj.indices[p]
                if color[v] == 0:
                    color[v] = color[u] * (1 if adj.data[p] > 0 else -1)
                    queue.append(v)
    consistent = color[g.rows] * color[g.cols] * np.sign(g.weights) > 0
    return g.drop_edges(consistent), color
