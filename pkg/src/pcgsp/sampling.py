"""Sampling-set selection: disc alignment, greedy disc shifting/scaling and budgeted search."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .balance import greedy_balance
from .errors import ContractError, ParseError
from .graph import GraphConfig, WeightedGraph, block3, build_knn_graph, laplacian
from .linalg import dense_eig, gershgorin_bounds, smallest_eigpair
from .normals import cross_orientation, linearize, linearize_coupled, orient_mst, pca_normals, select_pairs
from .pcio import knn_search

EIGVEC_FLOOR = 1e-12
SEARCH_ITERS = 40
# rounding slack when a disc is already (almost) exactly at the target
SCALE_SLACK = 1e-12


@dataclass(frozen=True)
class SamplingSet:
    """Strictly increasing indices of the sampled points among ``n``."""

    selected: np.ndarray
    n: int

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64).ravel()
        if sel.size and (sel[0] < 0 or sel[-1] >= self.n or np.any(np.diff(sel) <= 0)):
            raise ValueError("selected indices must be strictly increasing and within [0, n)")
        sel.setflags(write=False)
        object.__setattr__(self, "selected", sel)

    @property
    def m(self):
        return self.selected.shape[0]

    def selection_matrix(self):
        """``H~`` with one unit entry per row (m x n)."""
        return sp.csr_matrix((np.ones(self.m), (np.arange(self.m), self.selected)), shape=(self.m, self.n))

    def hth_diagonal(self, group_size=3):
        """Diagonal of ``H^T H`` for ``H = H~ kron I_group``."""
        mask = np.zeros(self.n)
        mask[self.selected] = 1.0
        return np.repeat(mask, group_size)

    def save(self, path, achieved_T=float("nan")):
        lines = [f"# n={self.n} m={self.m} T={achieved_T!r}"] + [str(i) for i in self.selected.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        """Read a sample set; returns ``(SamplingSet, achieved_T)``."""
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ParseError("missing '# n=.. m=.. T=..' header", 1)
        try:
            fields = dict(tok.split("=", 1) for tok in lines[0][1:].split())
            n, m, T = int(fields["n"]), int(fields["m"]), float(fields["T"])
        except (KeyError, ValueError):
            raise ParseError("malformed sample-set header", 1) from None
        idx = []
        for lineno, raw in enumerate(lines[1:], start=2):
            if raw.strip():
                try:
                    idx.append(int(raw))
                except ValueError:
                    raise ParseError("sample index is not an integer", lineno) from None
        if len(idx) != m:
            raise ParseError(f"header declares m={m}, found {len(idx)} indices", len(lines))
        return cls(np.array(idx, dtype=np.int64), n), T


@dataclass(frozen=True)
class GdasOutcome:
    """Result of disc shifting/scaling at one target.

    ``lower_bound`` is the smallest disc left-end guaranteed for
    ``H^T H + mu L_p`` after scaling by ``scalars``; it equals ``achieved_T``.
    ``order`` lists the sampled groups in the order they were taken.
    """

    samples: SamplingSet
    scalars: np.ndarray
    achieved_T: float
    feasible: bool
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def lower_bound(self):
        return self.achieved_T

    @property
    def sample_count(self):
        return self.samples.m


# --------------------------------------------------------------------- GDPA


def first_eigenvectors(Lcal_B, tol=1e-10, seed=0):
    """First eigenvector and eigenvalue of every connected block of a sparse symmetric matrix.

    Returns
    -------
    v : (d,) array, unit norm on each block, first nonzero entry positive
    lam : (d,) array, the block's smallest eigenvalue repeated on its rows
    """
    M = sp.csr_matrix(Lcal_B, dtype=float)
    pattern = M - sp.diags(M.diagonal())
    pattern.eliminate_zeros()
    ncomp, comp = connected_components(pattern, directed=False)
    v = np.empty(M.shape[0])
    lam = np.empty(M.shape[0])
    for c in range(ncomp):
        idx = np.flatnonzero(comp == c)
        sub = M[idx][:, idx]
        if idx.size <= 400:
            eig = dense_eig(sub)
            val, vec = eig.eigenvalues[0], eig.eigenvectors[:, 0]
            nz = np.flatnonzero(np.abs(vec) > 0)
            vec = vec if vec[nz[0]] > 0 else -vec
        else:
            val, vec = smallest_eigpair(sub, tol=tol, seed=seed)
        v[idx] = vec
        lam[idx] = val
    return v, lam


def gdpa_transform(Lcal_B, v):
    """Similarity transform ``S L_B S^-1`` with ``S = diag(1 / v)``.

    For a balanced, irreducible ``L_B`` and its first eigenvector ``v``, every
    Gershgorin left-end of the result equals the smallest eigenvalue.

    Raises
    ------
    ContractError
        If some ``|v_i| <= 1e-12``, which a connected balanced graph excludes.
    """
    M = sp.csr_matrix(Lcal_B, dtype=float)
    v = np.asarray(v, dtype=float)
    bad = np.flatnonzero(np.abs(v) <= EIGVEC_FLOOR)
    if bad.size:
        raise ContractError(f"first eigenvector vanishes at row {int(bad[0])}; "
                            "graph is reducible or unbalanced")
    coo = M.tocoo()
    # (S L S^-1)_ij = L_ij v_j / v_i
    data = coo.data * v[coo.col] / v[coo.row]
    return sp.csr_matrix((data, (coo.row, coo.col)), shape=M.shape)


# --------------------------------------------------------------------- GDAS


@numba.njit(cache=True)
def _bfs_order(d, indptr, indices, diag):
    """Row visiting order: BFS from the largest-diagonal unvisited row, repeated per component."""
    seen = np.zeros(d, dtype=np.bool_)
    order = np.empty(d, dtype=np.int64)
    by_diag = np.argsort(-diag, kind="mergesort")
    head = 0
    tail = 0
    for r in by_diag:
        if seen[r]:
            continue
        seen[r] = True
        order[tail] = r
        tail += 1
        while head < tail:
            i = order[head]
            head += 1
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if not seen[j]:
                    seen[j] = True
                    order[tail] = j
                    tail += 1
    return order


@numba.njit(cache=True)
def _gdas_kernel(indptr, indices, data, diag, order, T, group_size):
    d = diag.shape[0]
    c = diag.copy()
    s = np.ones(d)
    fin = np.zeros(d, dtype=np.bool_)
    sampled = np.zeros(d // group_size, dtype=np.bool_)
    taken = np.empty(d // group_size, dtype=np.int64)
    count = 0
    for i in order:
        radius = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j != i:
                a = abs(data[p])
                radius += a / s[j] if fin[j] else a
        grp = i // group_size
        if radius == 0.0:
            if c[i] < T and not sampled[grp]:
                sampled[grp] = True
                taken[count] = grp
                count += 1
                for r in range(grp * group_size, (grp + 1) * group_size):
                    c[r] += 1.0
            if c[i] < T:
                return s, sampled, taken[:count], False
            fin[i] = True
            continue
        val = (c[i] - T) / radius
        if val < 1.0 - SCALE_SLACK:
            if sampled[grp]:
                return s, sampled, taken[:count], False
            sampled[grp] = True
            taken[count] = grp
            count += 1
            for r in range(grp * group_size, (grp + 1) * group_size):
                c[r] += 1.0
            val = (c[i] - T) / radius
            if val < 1.0 - SCALE_SLACK:
                return s, sampled, taken[:count], False
        s[i] = max(val, 1.0)
        fin[i] = True
    return s, sampled, taken[:count], True


def _prepare(Lp_scaled):
    M = sp.csr_matrix(Lp_scaled, dtype=float)
    M.sort_indices()
    indptr = M.indptr.astype(np.int64)
    indices = M.indices.astype(np.int64)
    diag = M.diagonal().astype(float)
    order = _bfs_order(M.shape[0], indptr, indices, diag)
    return indptr, indices, M.data.astype(float), diag, order


def _outcome(prepared, T, group_size):
    indptr, indices, data, diag, order = prepared
    s, sampled, taken, ok = _gdas_kernel(indptr, indices, data, diag, order, float(T), int(group_size))
    return GdasOutcome(SamplingSet(np.flatnonzero(sampled), diag.shape[0] // group_size),
                       s, float(T), bool(ok), taken.copy())


def _check_groups(M, group_size):
    if group_size < 1 or M.shape[0] % group_size:
        raise ValueError("matrix dimension must be a multiple of group_size")


def gdas_for_target(Lp_aligned, mu, T, group_size=1):
    """Greedy disc shifting and scaling of ``H^T H + mu L_p`` to the target left-end ``T``.

    Rows are visited in BFS order from the row with the largest diagonal.
    Each row gets the scalar that puts its left-end exactly at ``T``, given
    the scalars already fixed; when that scalar would fall below 1 the row's
    group of ``group_size`` rows is sampled first (diagonal +1). All scalars
    are at least 1, so rows finalized earlier only gain slack.

    Returns
    -------
    GdasOutcome
        ``feasible`` is False when some row cannot reach ``T`` even after sampling.
    """
    M = sp.csr_matrix(Lp_aligned, dtype=float) * mu
    _check_groups(M, group_size)
    return _outcome(_prepare(M), T, group_size)


def binary_search_budget(Lp_aligned, mu, m, group_size=1, iters=SEARCH_ITERS):
    """Largest target ``T`` whose greedy sample count stays within ``m``.

    Bisection over ``[min left-end of mu L_p, 1 + max diagonal]``; infeasible
    targets count as over budget.

    Returns
    -------
    best : GdasOutcome
        Outcome at the largest accepted target (``sample_count <= m``).
    rejected : GdasOutcome
        Outcome at the smallest rejected target of the final bracket.
    """
    M = sp.csr_matrix(Lp_aligned, dtype=float) * mu
    _check_groups(M, group_size)
    prepared = _prepare(M)
    _, low, _ = gershgorin_bounds(M)
    high = 1.0 + float(prepared[3].max(initial=0.0))
    best = _outcome(prepared, low, group_size)
    if not best.feasible or best.sample_count > m:
        # the left-end floor always needs zero samples for aligned input
        raise ContractError("input discs are not aligned: target at the minimum left-end fails")
    rejected = _outcome(prepared, high, group_size)
    if rejected.feasible and rejected.sample_count <= m:
        return rejected, rejected
    for _ in range(iters):
        mid = 0.5 * (low + high)
        out = _outcome(prepared, mid, group_size)
        if out.feasible and out.sample_count <= m:
            low, best = mid, out
        else:
            high, rejected = mid, out
    return best, rejected


# ----------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class SmoothnessPrior:
    """Quadratic normal-smoothness prior ``p^T L p + 2 c^T p + const`` over interleaved coordinates."""

    graph: WeightedGraph
    normals: np.ndarray
    alphas: np.ndarray
    linearization: object
    Lcal: sp.csr_matrix
    c: np.ndarray


def build_prior(cloud, cfg=None, linearization="coupled"):
    """k-NN graph, oriented PCA normals and the linearized normal smoothness prior.

    ``linearization='coupled'`` expands each normal in all three of its
    points; ``'block'`` only in the point itself.
    """
    cfg = cfg or GraphConfig()
    n = len(cloud)
    if n < cfg.k + 1:
        raise ValueError(f"sub-cloud of {n} points is smaller than k+1={cfg.k + 1}")
    pts = cloud.points
    normals, _ = orient_mst(pca_normals(pts, cfg.k), pts, cfg.k)
    g = build_knn_graph(cloud.with_normals(normals), cfg)
    nbrs = knn_search(pts, min(cfg.k, n - 1))
    nodes = np.arange(n)
    pairs = select_pairs(nodes, nbrs, pts, fallback_pool=nodes)
    alphas = cross_orientation(nodes, pairs, pts, normals)
    if linearization == "coupled":
        lin = linearize_coupled(pairs, pts, alphas)
    elif linearization == "block":
        lin = linearize(nodes, pairs, pts, alphas)
    else:
        raise ValueError(f"unknown linearization {linearization!r}")
    Lbar = block3(laplacian(g))
    A = lin.A_bar
    Lcal = (A.T @ Lbar @ A).tocsr()
    Lcal = ((Lcal + Lcal.T) * 0.5).tocsr()
    c = A.T @ (Lbar @ lin.b_bar)
    return SmoothnessPrior(g, normals, alphas, lin, Lcal, np.asarray(c))


def _fill_budget(best, rejected, bfs_groups, m):
    chosen = list(best.samples.selected.tolist())
    have = set(chosen)
    for grp in list(rejected.order.tolist()) + list(bfs_groups):
        if len(chosen) >= m:
            break
        if grp not in have:
            have.add(grp)
            chosen.append(int(grp))
    return np.array(sorted(chosen), dtype=np.int64)


def sample_subcloud(cloud, cfg=None, mu=0.1, m=None, seed=0, linearization="coupled", delta=1e-4,
                    similarity=False):
    """Choose ``m`` points of a sub-cloud that keep the reconstruction system well conditioned.

    Pipeline: smoothness prior, greedy balancing of its signed graph,
    disc alignment with the first eigenvector, then budgeted disc
    shifting/scaling. Remaining budget is filled with the rows the last
    rejected target wanted, then in BFS order.

    Returns
    -------
    SamplingSet
    diagnostics : dict
        ``prior``, ``lambda_min_balanced``, ``achieved_T``, ``greedy_count``,
        ``relative_error``, ``dcs`` (only with ``similarity=True``, else None)
        and ``balanced`` (the balancing result).
    """
    from .metrics import deltacon_similarity, relative_error

    n = len(cloud)
    if m is None:
        raise ValueError("sample budget m is required")
    m = int(m)
    if not 0 <= m <= n:
        raise ValueError(f"budget m={m} outside [0, {n}]")
    prior = build_prior(cloud, cfg, linearization)
    signed = WeightedGraph.from_matrix(prior.Lcal, generalized=True)
    bal = greedy_balance(signed, seed=seed, delta=delta)
    v, lam = first_eigenvectors(bal.Lcal_B, seed=seed)
    Lp = gdpa_transform(bal.Lcal_B, v)
    best, rejected = binary_search_budget(Lp, mu, m, group_size=3)
    prepared = _prepare(Lp * mu)
    bfs_groups = _first_appearance(prepared[4] // 3)
    selected = _fill_budget(best, rejected, bfs_groups, m)
    L_signed = laplacian(signed)
    diagnostics = {
        "prior": prior,
        "balanced": bal,
        "lambda_min_balanced": float(lam.min()),
        "achieved_T": best.achieved_T,
        "greedy_count": best.sample_count,
        "relative_error": relative_error(L_signed, bal.L_B),
        "dcs": deltacon_similarity(signed, bal.graph) if similarity else None,
    }
    return SamplingSet(selected, n), diagnostics


def _first_appearance(groups):
    _, first = np.unique(groups, return_index=True)
    return groups[np.sort(first)]
