"""Signed weighted graphs, Laplacians, graph regularizers, GMRF covariance and bipartite approximation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ParseError
from .linalg import cg_solve
from .pcio import knn_search

KLD_EXACT_LIMIT = 200


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected signed graph with optional self-loops.

    Edges are stored once with ``rows < cols``, sorted lexicographically.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    self_loops: np.ndarray | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if not (rows.shape == cols.shape == w.shape):
            raise ValueError("edge arrays must have equal length")
        if np.any(rows == cols):
            raise ValueError("self edges belong in self_loops")
        if not np.all(np.isfinite(w)):
            raise ValueError("edge weights must be finite")
        lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
        if lo.size and (lo.min() < 0 or hi.max() >= self.n):
            raise ValueError("edge endpoint out of range")
        order = np.lexsort((hi, lo))
        lo, hi, w = lo[order], hi[order], w[order]
        if lo.size > 1 and np.any((lo[1:] == lo[:-1]) & (hi[1:] == hi[:-1])):
            raise ValueError("duplicate edge")
        loops = np.zeros(self.n) if self.self_loops is None else np.asarray(self.self_loops, dtype=float).copy()
        if loops.shape != (self.n,):
            raise ValueError("self_loops must have one entry per node")
        for arr in (lo, hi, w, loops):
            arr.setflags(write=False)
        object.__setattr__(self, "rows", lo)
        object.__setattr__(self, "cols", hi)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "self_loops", loops)

    @property
    def edge_count(self):
        return self.rows.shape[0]

    def adjacency(self):
        """Symmetric CSR adjacency ``W`` (self-loops excluded)."""
        W = sp.coo_matrix((np.r_[self.weights, self.weights],
                           (np.r_[self.rows, self.cols], np.r_[self.cols, self.rows])),
                          shape=(self.n, self.n))
        return W.tocsr()

    def edge_dict(self):
        return {(int(i), int(j)): float(w) for i, j, w in zip(self.rows, self.cols, self.weights)}

    def neighbor_lists(self):
        nbrs = [[] for _ in range(self.n)]
        for i, j in zip(self.rows.tolist(), self.cols.tolist()):
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(x) for x in nbrs]

    def drop_edges(self, keep_mask):
        keep_mask = np.asarray(keep_mask, dtype=bool)
        return WeightedGraph(self.n, self.rows[keep_mask], self.cols[keep_mask],
                             self.weights[keep_mask], self.self_loops)

    @classmethod
    def from_edge_dict(cls, n, edges, self_loops=None):
        items = sorted(edges.items())
        rows = [min(i, j) for (i, j), _ in items]
        cols = [max(i, j) for (i, j), _ in items]
        return cls(n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                   np.array([w for _, w in items], dtype=float), self_loops)

    @classmethod
    def from_matrix(cls, M, generalized=True):
        """Read edges ``w_ij = -M(i,j)`` and, for a generalized Laplacian, the self-loops."""
        M = sp.csr_matrix(M)
        U = sp.triu(M, k=1).tocoo()
        keep = U.data != 0
        n = M.shape[0]
        loops = None
        if generalized:
            _, loops = strip_self_loops(M)
        return cls(n, U.row[keep], U.col[keep], -U.data[keep], loops)


@dataclass(frozen=True)
class GraphConfig:
    """k-NN graph parameters; ``sigma_p=None`` selects the median neighbor distance."""

    k: int = 8
    sigma_p: float | None = None
    sigma_n: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.sigma_p is not None and self.sigma_p <= 0:
            raise ValueError("sigma_p must be positive")
        if self.sigma_n <= 0:
            raise ValueError("sigma_n must be positive")


def knn_edges(points, k):
    """Undirected edge list of the k-NN graph under the "or" rule (i < j, sorted)."""
    nbrs = knn_search(points, k)
    n = nbrs.shape[0]
    a = np.repeat(np.arange(n), nbrs.shape[1])
    b = nbrs.ravel()
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    pairs = np.unique(lo * n + hi)
    return pairs // n, pairs % n


def auto_sigma_p(points, k):
    nbrs = knn_search(points, k)
    dist = np.linalg.norm(points[nbrs] - points[:, None, :], axis=2)
    s = float(np.median(dist))
    return s if s > 0 else 1.0


def build_knn_graph(cloud, cfg):
    """k-NN graph with weights from point distance and normal difference."""
    if cloud.normals is None:
        raise ValueError("build_knn_graph needs normals")
    pts, nrm = cloud.points, cloud.normals
    k = min(cfg.k, len(cloud) - 1)
    sigma_p = cfg.sigma_p if cfg.sigma_p is not None else auto_sigma_p(pts, k)
    i, j = knn_edges(pts, k)
    dp = np.sum((pts[i] - pts[j]) ** 2, axis=1)
    dn = np.sum((nrm[i] - nrm[j]) ** 2, axis=1)
    w = np.exp(-dp / sigma_p**2 - dn / cfg.sigma_n**2)
    # weights can underflow for far neighbours; keep edges strictly positive
    w = np.maximum(w, np.finfo(float).tiny)
    return WeightedGraph(len(cloud), i, j, w)


# --------------------------------------------------------------- Laplacians


def laplacian(g, kind="combinatorial"):
    """``L = D - W`` or the generalized ``L + diag(self_loops)``."""
    if kind not in ("combinatorial", "generalized"):
        raise ValueError(f"unknown Laplacian kind {kind!r}")
    W = g.adjacency()
    deg = np.asarray(W.sum(axis=1)).ravel()
    diag = deg + (g.self_loops if kind == "generalized" else 0.0)
    return (sp.diags(diag) - W).tocsr()


def strip_self_loops(M):
    """Split a generalized Laplacian into its loop-free Laplacian and self-loop weights.

    Returns
    -------
    L : csr_matrix with ``L(i,i) = -sum_{j != i} M(i,j)``
    loops : (n,) array with ``M = L + diag(loops)``
    """
    M = sp.csr_matrix(M, dtype=float)
    diag = M.diagonal()
    off = M - sp.diags(diag)
    row_sum = np.asarray(off.sum(axis=1)).ravel()
    L = (off - sp.diags(row_sum)).tocsr()
    return L, diag + row_sum


def block3(L):
    """``diag(L, L, L)`` acting on component-blocked 3n vectors."""
    return sp.block_diag((L, L, L), format="csr")


def glr(L, x):
    x = np.asarray(x, dtype=float)
    if L.shape[0] != x.shape[0]:
        raise ValueError("dimension mismatch")
    return float(x @ (L @ x))


def fglr(L_block, normals_stack):
    """Feature smoothness ``n^T diag(L, L, L) n`` for normals stacked as [n_x; n_y; n_z]."""
    return glr(L_block, normals_stack)


def normals_stack(normals):
    return np.asarray(normals, dtype=float).T.ravel()


# -------------------------------------------------------------------- GMRF


@dataclass(frozen=True)
class GmrfModel:
    precision: sp.csr_matrix
    delta: float

    @classmethod
    def from_laplacian(cls, Lcal, delta=1e-4):
        if delta <= 0:
            raise ValueError("delta must be positive")
        Lcal = sp.csr_matrix(Lcal, dtype=float)
        return cls((Lcal + delta * sp.identity(Lcal.shape[0])).tocsr(), float(delta))


def gmrf_apply_covariance(model, y, tol=1e-10, max_iter=None):
    """Covariance product ``(Lcal + delta I)^{-1} y`` by conjugate gradient."""
    return cg_solve(model.precision, y, tol=tol, max_iter=max_iter)


# ----------------------------------------------------- bipartite approximation


def _logdet_pd(A):
    c = np.linalg.cholesky(A)
    return 2.0 * np.sum(np.log(np.diag(c)))


def _kld_pair(nodes, adj, side, v, delta):
    """KLD for placing node ``v`` on side 1 and on side 2, over the subgraph ``nodes``.

    Only edges among ``nodes`` count. The original-graph terms are shared by
    both branches but are included so the values are true divergences.
    """
    idx = {u: t for t, u in enumerate(nodes)}
    s = len(nodes)
    W = np.zeros((s, s))
    for u in nodes:
        for x, w in adj[u].items():
            t = idx.get(x)
            if t is not None:
                W[idx[u], t] = w
    L = np.diag(W.sum(axis=1)) - W
    P = L + delta * np.eye(s)
    Sigma = np.linalg.inv(P)
    logdet_p = _logdet_pd(P)
    out = []
    for branch in (1, 2):
        sides = np.array([side[u] if u != v else branch for u in nodes])
        WB = W * (sides[:, None] != sides[None, :])
        PB = np.diag(WB.sum(axis=1)) - WB + delta * np.eye(s)
        out.append(0.5 * (np.sum(PB * Sigma) - _logdet_pd(PB) + logdet_p - s))
    return out[0], out[1]


def _local_window(v, adj, visited_flag, hops=2):
    seen = {v}
    frontier = [v]
    for _ in range(hops):
        nxt = []
        for u in frontier:
            for x in adj[u]:
                if x not in seen and visited_flag[x]:
                    seen.add(x)
                    nxt.append(x)
        frontier = nxt
    return sorted(seen)


def bipartite_approx(g, delta=1e-4, seed=0, exact_limit=KLD_EXACT_LIMIT, return_trace=False):
    """Greedy KLD-driven bipartite approximation.

    Nodes are visited in BFS order from a random root (per connected
    component). Each node goes to the side whose tentative assignment gives
    the smaller divergence between the GMRF of the visited subgraph and that
    of its bipartite approximation; exact ties alternate sides. Graphs with
    more than ``exact_limit`` nodes score each decision on the visited nodes
    within two hops instead of on all visited nodes.

    Returns
    -------
    V1, V2 : sorted int arrays
    g_B : WeightedGraph keeping only edges that cross the sides
    trace : list of (node, kld_side1, kld_side2, chosen_side), if requested
    """
    n = g.n
    adj = [dict() for _ in range(n)]
    for i, j, w in zip(g.rows.tolist(), g.cols.tolist(), g.weights.tolist()):
        adj[i][j] = w
        adj[j][i] = w
    rng = np.random.default_rng(seed)
    _, comp = connected_components(g.adjacency(), directed=False)
    side = np.zeros(n, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    order = []
    trace = []
    toggle = 2
    exact = n <= exact_limit
    for c in np.unique(comp):
        members = np.flatnonzero(comp == c)
        root = int(members[rng.integers(members.size)])
        side[root] = 1
        visited[root] = True
        order.append(root)
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u]):
                if visited[v]:
                    continue
                visited[v] = True
                nodes = sorted(order + [v]) if exact else _local_window(v, adj, visited)
                k1, k2 = _kld_pair(nodes, adj, side, v, delta)
                if k2 > k1:
                    choice = 1
                elif k1 > k2:
                    choice = 2
                else:
                    choice = toggle
                    toggle = 3 - toggle
                side[v] = choice
                order.append(v)
                trace.append((v, k1, k2, choice))
                queue.append(v)
    cross = side[g.rows] != side[g.cols]
    V1 = np.flatnonzero(side == 1)
    V2 = np.flatnonzero(side == 2)
    g_B = g.drop_edges(cross)
    if return_trace:
        return V1, V2, g_B, trace
    return V1, V2, g_B


def is_bipartition(g, V1):
    in1 = np.zeros(g.n, dtype=bool)
    in1[np.asarray(V1, dtype=np.int64)] = True
    return bool(np.all(in1[g.rows] != in1[g.cols]))


# ---------------------------------------------------------------- edge lists


def save_edge_list(g, path, coloring=None):
    lines = [f"# n {g.n}"]
    lines += [f"{i} {j} {w!r}" for i, j, w in zip(g.rows.tolist(), g.cols.tolist(), g.weights.tolist())]
    lines += [f"# selfloop {i} {u!r}" for i, u in enumerate(g.self_loops.tolist()) if u != 0]
    if coloring is not None:
        lines += [f"# color {i} {int(b):+d}" for i, b in enumerate(coloring)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_edge_list(path):
    """Parse an edge list written by :func:`save_edge_list`; returns (graph, coloring or None)."""
    n = None
    edges, loops, colors = {}, {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = raw.split()
        if not tok:
            continue
        try:
            if tok[0] == "#":
                if len(tok) >= 3 and tok[1] == "n":
                    n = int(tok[2])
                elif len(tok) == 4 and tok[1] == "selfloop":
                    loops[int(tok[2])] = float(tok[3])
                elif len(tok) == 4 and tok[1] == "color":
                    colors[int(tok[2])] = int(tok[3])
                continue
            i, j, w = int(tok[0]), int(tok[1]), float(tok[2])
        except (ValueError, IndexError):
            raise ParseError("malformed edge-list line", lineno) from None
        edges[(min(i, j), max(i, j))] = w
    if n is None:
        ids = [x for e in edges for x in e] + list(loops) + list(colors)
        n = max(ids) + 1 if ids else 0
    sl = np.zeros(n)
    for i, u in loops.items():
        sl[i] = u
    coloring = None
    if colors:
        coloring = np.array([colors.get(i, 1) for i in range(n)], dtype=np.int64)
    return WeightedGraph.from_edge_dict(n, edges, sl), coloring
