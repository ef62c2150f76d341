"""Reconstruction solvers: super-resolution QP, FGLR denoisers (l2 / l1) and GTV ADMM denoising."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import SolverError
from .graph import GraphConfig, bipartite_approx, block3, build_knn_graph, laplacian
from .linalg import SpectralBounds, cg_solve, gershgorin_bounds, gsf_solve, lanczos_filter, power_lambda_max, smallest_eigpair
from .normals import cross_orientation, linearize, orient_mst, pca_normals, select_pairs
from .pcio import PointCloud, bounding_diagonal, knn_search
from .sampling import SamplingSet, build_prior

LIPSCHITZ_SAFETY = 1.01
STAGNATION_WINDOW = 50


@dataclass(frozen=True)
class SolverConfig:
    """Trade-offs and iteration controls shared by the reconstruction solvers.

    ``step=None`` uses ``1 / L`` for APG and ``1 / rho`` for the ADMM
    auxiliary step. ``anchor`` is the weight pulling unconstrained
    super-resolution directions toward their initial positions.
    """

    mu: float = 0.1
    gamma: float = 0.5
    rho: float = 1.0
    step: float | None = None
    lanczos_order: int = 20
    outer_iters: int = 20
    inner_tol: float = 1e-8
    admm_iters: int = 300
    admm_tol: float = 1e-5
    apg_iters: int = 100
    p_norm: int = 2
    anchor: float = 1e-3

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.p_norm not in (1, 2):
            raise ValueError("p_norm must be 1 or 2")
        if self.anchor < 0:
            raise ValueError("anchor must be non-negative")


@dataclass
class DenoiseResult:
    """Denoised coordinates plus per-iteration diagnostics."""

    points: np.ndarray
    outer_iterations: int
    history: dict = field(default_factory=dict)


# ------------------------------------------------------------ super-resolution


def sr_solve(q, sampling, Lcal, c, mu, tol=1e-10, x0=None, anchor=0.0, fix_samples=False):
    """Minimize ``||q - H p||^2 + mu (p^T L p + 2 c^T p) + anchor ||p - x0||^2``.

    Solves ``(H^T H + mu L + anchor I) p = H^T q - mu c + anchor x0`` by CG.
    With ``fix_samples`` the sampled points are held at ``q`` exactly and
    only the remaining coordinates are solved for.

    Parameters
    ----------
    q : (m, 3) sampled coordinates, in ``sampling.selected`` order
    sampling : SamplingSet over n points
    Lcal, c : prior over interleaved coordinates (3n)

    Returns
    -------
    (n, 3) array

    Raises
    ------
    SolverError
        When CG fails; carries a smallest-eigenvalue estimate of the system.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    n = sampling.n
    if q.shape[0] != sampling.m:
        raise ValueError("q must have one row per sampled point")
    Lcal = sp.csr_matrix(Lcal, dtype=float)
    c = np.asarray(c, dtype=float)
    x0 = np.zeros(3 * n) if x0 is None else np.asarray(x0, dtype=float).ravel()
    rows = (3 * sampling.selected[:, None] + np.arange(3)).ravel()
    hq = np.zeros(3 * n)
    hq[rows] = q.ravel()
    if fix_samples:
        free = np.setdiff1d(np.arange(3 * n), rows)
        p = hq.copy()
        if free.size == 0:
            return p.reshape(n, 3)
        Lff = Lcal[free][:, free]
        rhs = -mu * (Lcal[free][:, rows] @ hq[rows] + c[free]) + anchor * x0[free]
        system = (mu * Lff + anchor * sp.identity(free.size)).tocsr()
        p[free] = _solve_or_report(system, rhs, tol, x0[free])
        return p.reshape(n, 3)
    diag = np.zeros(3 * n)
    diag[rows] = 1.0
    system = (sp.diags(diag + anchor) + mu * Lcal).tocsr()
    rhs = hq - mu * c + anchor * x0
    return _solve_or_report(system, rhs, tol, x0).reshape(n, 3)


def _solve_or_report(system, rhs, tol, x0):
    try:
        return cg_solve(system, rhs, tol=tol, x0=x0)
    except SolverError as exc:
        try:
            lam, _ = smallest_eigpair(system, tol=1e-6)
        except SolverError:
            lam = None
        raise SolverError(f"reconstruction system not solved: {exc}", residual=exc.residual,
                          lambda_min=lam) from None


def upsample_midpoints(points, target_n, k=6):
    """Grow a point set to ``target_n`` points by inserting midpoints of the longest k-NN edges.

    Original points keep their indices (first rows); each round inserts
    midpoints of the longest unique edges, at most one per existing point pair.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if target_n < len(pts):
        raise ValueError("target_n must not be smaller than the input")
    while len(pts) < target_n:
        n = len(pts)
        if n < 2:
            raise ValueError("need at least two points to interpolate")
        nbrs = knn_search(pts, min(k, n - 1))
        a = np.repeat(np.arange(n), nbrs.shape[1])
        b = nbrs.ravel()
        key = np.unique(np.minimum(a, b) * n + np.maximum(a, b))
        i, j = key // n, key % n
        length = np.linalg.norm(pts[i] - pts[j], axis=1)
        order = np.lexsort((key, -length))
        take = order[: target_n - n]
        pts = np.vstack([pts, 0.5 * (pts[i[take]] + pts[j[take]])])
    return pts


def superresolve(samples, target_n, graph_cfg=None, solver_cfg=None, iterations=1):
    """Reconstruct ``target_n`` points from samples with the linearized normal prior.

    The samples stay fixed; inserted points start at edge midpoints and are
    moved by :func:`sr_solve`. Each iteration re-linearizes around the
    current estimate.
    """
    solver_cfg = solver_cfg or SolverConfig()
    q = np.asarray(samples.points if isinstance(samples, PointCloud) else samples, dtype=float)
    m = len(q)
    p = upsample_midpoints(q, target_n, k=6)
    if m == target_n:
        return PointCloud(p)
    sampling = SamplingSet(np.arange(m), target_n)
    for _ in range(iterations):
        prior = build_prior(PointCloud(p), graph_cfg, linearization="block")
        p = sr_solve(q, sampling, prior.Lcal, prior.c, solver_cfg.mu, tol=solver_cfg.inner_tol,
                     x0=p.ravel(), anchor=solver_cfg.anchor, fix_samples=True)
    return PointCloud(p)


# --------------------------------------------------------- FGLR denoisers


@dataclass(frozen=True)
class HalfProblem:
    """Linearized prior of one side of the bipartition with the other side fixed.

    ``Ltilde = A^T L A`` and ``c = A^T L b`` act on the interleaved
    coordinates of ``nodes``; ``graph`` is the k-NN graph among them.
    """

    nodes: np.ndarray
    Ltilde: sp.csr_matrix
    c: np.ndarray
    linearization: object
    graph: object


def half_problem(points, var_nodes, fixed_nodes, graph_cfg=None):
    """Normals of ``var_nodes`` linearized with neighbor pairs taken from ``fixed_nodes``."""
    cfg = graph_cfg or GraphConfig()
    points = np.asarray(points, dtype=float)
    var_nodes = np.asarray(var_nodes, dtype=np.int64)
    fixed_nodes = np.asarray(fixed_nodes, dtype=np.int64)
    k = min(cfg.k, len(points) - 1)
    normals, _ = orient_mst(pca_normals(points, k), points, k)
    nbrs = knn_search(points, k)
    fixed_mask = np.zeros(len(points), dtype=bool)
    fixed_mask[fixed_nodes] = True
    cand = [[x for x in nbrs[i] if fixed_mask[x]] for i in var_nodes]
    pairs = select_pairs(var_nodes, cand, points, fallback_pool=fixed_nodes)
    lin = linearize(var_nodes, pairs, points, cross_orientation(var_nodes, pairs, points, normals))
    sub_cfg = GraphConfig(min(cfg.k, len(var_nodes) - 1), cfg.sigma_p, cfg.sigma_n)
    graph = build_knn_graph(PointCloud(points[var_nodes], normals[var_nodes]), sub_cfg)
    Lbar = block3(laplacian(graph))
    A = lin.A_bar
    Lt = (A.T @ Lbar @ A).tocsr()
    Lt = ((Lt + Lt.T) * 0.5).tocsr()
    return HalfProblem(var_nodes, Lt, np.asarray(A.T @ (Lbar @ lin.b_bar)), lin, graph)


def red_blue_partition(q, graph_cfg=None, seed=0):
    """Bipartition of the k-NN graph by the KLD-driven greedy approximation."""
    cfg = graph_cfg or GraphConfig()
    k = min(cfg.k, len(q) - 1)
    normals, _ = orient_mst(pca_normals(q, k), q, k)
    g = build_knn_graph(PointCloud(q, normals), GraphConfig(k, cfg.sigma_p, cfg.sigma_n))
    V1, V2, _ = bipartite_approx(g, seed=seed)
    return V1, V2


def _sides(q, graph_cfg, partition, seed):
    if partition is None:
        V1, V2 = red_blue_partition(q, graph_cfg, seed)
    else:
        V1, V2 = (np.asarray(x, dtype=np.int64) for x in partition)
    if len(V1) < 3 or len(V2) < 3:
        raise ValueError("each side of the bipartition needs at least 3 points")
    return ((V1, V2), (V2, V1))


def quadratic_objective(p, q, Ltilde, c, gamma):
    """``||q - p||^2 + gamma (p^T L p + 2 c^T p)`` over interleaved coordinates."""
    p = np.asarray(p, dtype=float).ravel()
    r = np.asarray(q, dtype=float).ravel() - p
    return float(r @ r + gamma * (p @ (Ltilde @ p) + 2.0 * c @ p))


def solve_filter(Ltilde, rhs, gamma, solver="cg", order=20, tol=1e-10):
    """``(I + gamma L) p = rhs`` by CG, dense spectral filtering or a Lanczos filter."""
    if solver == "cg":
        system = (sp.identity(Ltilde.shape[0]) + gamma * Ltilde).tocsr()
        return cg_solve(system, rhs, tol=tol)
    if solver == "dense-gsf":
        return gsf_solve(Ltilde, rhs, gamma)
    if solver == "lanczos":
        return lanczos_filter(Ltilde, rhs, gamma, order)
    raise ValueError(f"unknown solver {solver!r}")


def _converged(p_new, p_old, diag):
    return np.max(np.abs(p_new - p_old)) <= 1e-6 * diag


def denoise_fglr_l2(q, graph_cfg=None, gamma=0.5, outer_iters=20, solver="cg", order=20, tol=1e-10,
                    partition=None, seed=0):
    """Alternating FGLR denoising with a quadratic fidelity.

    Each outer iteration visits both sides of a red/blue bipartition. For the
    varying side it rebuilds the graph and normal linearization at the
    current estimate and solves ``(I + gamma A^T L A) p = q - gamma A^T L b``.

    Returns
    -------
    DenoiseResult
        ``history['objective_before']`` / ``['objective_after']`` hold the
        quadratic objective of every half-step under its fixed linearization.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if gamma == 0:
        return DenoiseResult(q.copy(), 1, {})
    diag = bounding_diagonal(q)
    sides = _sides(q, graph_cfg, partition, seed)
    p = q.copy()
    hist = {"objective_before": [], "objective_after": []}
    it = 0
    for it in range(1, outer_iters + 1):
        before = p.copy()
        for var, fixed in sides:
            hp = half_problem(p, var, fixed, graph_cfg)
            qv = q[var].ravel()
            new = solve_filter(hp.Ltilde, qv - gamma * hp.c, gamma, solver, order, tol)
            hist["objective_before"].append(quadratic_objective(p[var], qv, hp.Ltilde, hp.c, gamma))
            hist["objective_after"].append(quadratic_objective(new, qv, hp.Ltilde, hp.c, gamma))
            p[var] = new.reshape(-1, 3)
        if _converged(p, before, diag):
            break
    return DenoiseResult(p, it, hist)


def soft_threshold(x, tau):
    """Component-wise ``sign(x) max(|x| - tau, 0)``."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def prox_l1_fidelity(v, q, t):
    """Proximal operator of ``t ||q - p||_1`` evaluated at ``v``."""
    q = np.asarray(q, dtype=float)
    return q + soft_threshold(np.asarray(v, dtype=float) - q, t)


def _apg_l1(q, Lt, c, gamma, t, iters, tol):
    """Monotone APG for ``||q - p||_1 + gamma (p^T L p + 2 c^T p)`` started at ``q``."""

    def objective(p):
        return float(np.abs(q - p).sum() + gamma * (p @ (Lt @ p) + 2.0 * c @ p))

    def grad(p):
        return 2.0 * gamma * (Lt @ p + c)

    x = q.copy()
    x_prev = x.copy()
    f_x = objective(x)
    trace = [f_x]
    theta = 1.0
    z = x.copy()
    for _ in range(iters):
        cand = prox_l1_fidelity(z - t * grad(z), q, t)
        f_c = objective(cand)
        if f_c > f_x:
            # extrapolated step increased the objective: fall back to a plain step
            cand = prox_l1_fidelity(x - t * grad(x), q, t)
            f_c = objective(cand)
        theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta**2))
        x_prev, x = x, cand if f_c <= f_x else x
        step = np.max(np.abs(x - x_prev))
        z = x + ((theta - 1.0) / theta_next) * (x - x_prev)
        theta = theta_next
        f_x = min(f_c, f_x)
        trace.append(f_x)
        if step <= tol:
            break
    return x, trace


def denoise_fglr_l1(q, graph_cfg=None, gamma=0.5, outer_iters=20, step=None, apg_iters=100, tol=1e-10,
                    partition=None, seed=0):
    """Alternating FGLR denoising with an l1 fidelity solved by accelerated proximal gradient.

    Red/blue alternation as in :func:`denoise_fglr_l2`. The step is ``1 / L``
    with ``L = 2 gamma * 1.01 * lambda_max`` from power iteration, unless a
    smaller ``step`` is given.

    Returns
    -------
    DenoiseResult
        ``history['apg_objective']`` holds the accepted-iterate objective of
        every half-step; ``history['step']`` the steps used and
        ``history['lipschitz']`` the constants they were derived from.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if gamma == 0:
        return DenoiseResult(q.copy(), 1, {})
    diag = bounding_diagonal(q)
    sides = _sides(q, graph_cfg, partition, seed)
    p = q.copy()
    hist = {"apg_objective": [], "step": [], "lipschitz": []}
    it = 0
    for it in range(1, outer_iters + 1):
        before = p.copy()
        for var, fixed in sides:
            hp = half_problem(p, var, fixed, graph_cfg)
            lip = 2.0 * gamma * LIPSCHITZ_SAFETY * power_lambda_max(hp.Ltilde)
            t = 1.0 / lip if lip > 0 else 1.0
            if step is not None:
                t = min(t, step)
            new, trace = _apg_l1(q[var].ravel(), hp.Ltilde, hp.c, gamma, t, apg_iters, tol * diag)
            hist["apg_objective"].append(trace)
            hist["step"].append(t)
            hist["lipschitz"].append(lip)
            p[var] = new.reshape(-1, 3)
        if _converged(p, before, diag):
            break
    return DenoiseResult(p, it, hist)


# ------------------------------------------------------------------ GTV ADMM


@dataclass
class AdmmState:
    """Scaled-form ADMM variables for one red (or blue) half-problem.

    ``Bdiff`` maps interleaved variable coordinates to per-edge normal
    differences (component-interleaved, 3 rows per edge); ``v`` is the
    matching offset so that edge differences equal ``Bdiff p + v``.
    """

    p: np.ndarray
    m: np.ndarray
    u: np.ndarray
    Bdiff: sp.csr_matrix
    v: np.ndarray


def difference_operator(lin, edges_i, edges_j):
    """Edge-difference operator of linearized normals: rows ``A_i p_i - A_j p_j`` per edge."""
    nodes = lin.pairs.nodes.shape[0]
    ei = np.asarray(edges_i, dtype=np.int64)
    ej = np.asarray(edges_j, dtype=np.int64)
    E = len(ei)
    # entry (edge, sign, component, coord) of the two 3x3 blocks per edge
    row = np.broadcast_to(3 * np.arange(E)[:, None, None, None] + np.arange(3)[None, None, :, None], (E, 2, 3, 3))
    node = np.stack([ei, ej], axis=1)
    col = np.broadcast_to(3 * node[:, :, None, None] + np.arange(3)[None, None, None, :], (E, 2, 3, 3))
    vals = np.stack([lin.A_blocks[ei], -lin.A_blocks[ej]], axis=1)
    Bdiff = sp.csr_matrix((vals.ravel(), (row.ravel(), col.ravel())), shape=(3 * E, 3 * nodes))
    v = (lin.b_blocks[edges_i] - lin.b_blocks[edges_j]).ravel()
    return Bdiff, v


def _admm(q_sub, Bdiff, v, w_edges, gamma, rho, iters, tol, step, apg_iters):
    d = q_sub.size
    p = q_sub.copy()
    m = Bdiff @ p + v
    u = np.zeros_like(m)
    system = (2.0 * sp.identity(d) + rho * (Bdiff.T @ Bdiff)).tocsr()
    t = 1.0 / rho if step is None else min(step, 1.0 / rho)
    tau = np.repeat(t * gamma * w_edges, 3)
    residuals = []
    worse = 0
    for _ in range(iters):
        rhs = 2.0 * q_sub + rho * (Bdiff.T @ (m - u - v))
        p = cg_solve(system, rhs, tol=1e-12, x0=p)
        target = Bdiff @ p + v + u
        # APG on gamma w ||m||_1 + rho/2 ||m - target||^2 (Lipschitz constant rho)
        mm = m.copy()
        z = mm.copy()
        theta = 1.0
        for _ in range(apg_iters):
            nxt = soft_threshold(z - t * rho * (z - target), tau)
            theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta**2))
            z = nxt + ((theta - 1.0) / theta_next) * (nxt - mm)
            moved = np.max(np.abs(nxt - mm), initial=0.0)
            mm, theta = nxt, theta_next
            if moved <= 1e-14:
                break
        m = mm
        r = Bdiff @ p + v - m
        u = u + r
        res = float(np.linalg.norm(r))
        worse = worse + 1 if residuals and res >= residuals[-1] else 0
        residuals.append(res)
        if res < tol:
            break
        if worse >= STAGNATION_WINDOW:
            break
    return AdmmState(p, m, u, Bdiff, v), residuals, worse >= STAGNATION_WINDOW


def denoise_gtv_admm(q, graph_cfg=None, gamma=0.5, rho=1.0, iters=300, outer_iters=10, tol=1e-5,
                     partition=None, seed=0, step=None, apg_iters=100):
    """GTV-of-normals denoising, alternating between the two sides of a bipartition.

    Each half-iteration fixes one side, linearizes the other side's normals
    with neighbor pairs from the fixed side and runs scaled ADMM on
    ``||q - p||^2 + gamma sum_ij w_ij ||n_i - n_j||_1`` over the varying
    side's k-NN graph.

    Parameters
    ----------
    partition : (V1, V2), optional
        Defaults to the KLD bipartite approximation of the k-NN graph.

    Returns
    -------
    DenoiseResult
        ``history['residuals']`` holds the primal residual trace of every
        ADMM run and ``history['stagnated']`` flags runs stopped for 50
        non-decreasing residuals.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if gamma == 0:
        return DenoiseResult(q.copy(), 1, {"residuals": [], "stagnated": []})
    sides = _sides(q, graph_cfg, partition, seed)
    diag = bounding_diagonal(q)
    p = q.copy()
    hist = {"residuals": [], "stagnated": []}
    it = 0
    for it in range(1, outer_iters + 1):
        before = p.copy()
        for var, fixed in sides:
            hp = half_problem(p, var, fixed, graph_cfg)
            Bdiff, v = difference_operator(hp.linearization, hp.graph.rows, hp.graph.cols)
            state, res, stalled = _admm(q[var].ravel(), Bdiff, v, hp.graph.weights, gamma, rho, iters,
                                        tol, step, apg_iters)
            p[var] = state.p.reshape(-1, 3)
            hist["residuals"].append(res)
            hist["stagnated"].append(stalled)
        if _converged(p, before, diag):
            break
    return DenoiseResult(p, it, hist)


def spectral_bounds(graph, pairs):
    """Gershgorin upper bound on the graph Laplacian spectrum and the smallest pair geometry term."""
    if graph.edge_count == 0:
        return SpectralBounds(0.0, pairs.min_geom)
    _, _, upper = gershgorin_bounds(laplacian(graph))
    return SpectralBounds(upper, pairs.min_geom)
