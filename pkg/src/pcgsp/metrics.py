"""Cloud distances (C2C, C2P), Laplacian relative error, DELTACON similarity and lambda_min reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ContractError
from .graph import laplacian
from .linalg import smallest_eigpair
from .normals import pca_normals
from .pcio import PointCloud, nearest_in

DENSE_LIMIT = 500


@dataclass(frozen=True)
class MetricsConfig:
    """``dcs_epsilon=None`` picks ``1 / (1 + max degree)`` over both graphs."""

    dcs_epsilon: float | None = None
    c2p_normal_k: int = 8

    def __post_init__(self):
        if self.dcs_epsilon is not None and self.dcs_epsilon <= 0:
            raise ValueError("dcs_epsilon must be positive")
        if self.c2p_normal_k < 2:
            raise ValueError("c2p_normal_k must be at least 2")


def _points(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("cloud is empty")
    return pts


def c2c(gt, rec):
    """Symmetric cloud-to-cloud distance: the larger directed mean nearest-neighbor distance."""
    a, b = _points(gt), _points(rec)
    return float(max(nearest_in(b, a)[0].mean(), nearest_in(a, b)[0].mean()))


def _directed_c2p(src, ref, ref_normals):
    _, idx = nearest_in(ref, src)
    return float(np.mean(np.abs(np.sum((src - ref[idx]) * ref_normals[idx], axis=1))))


def c2p(gt, rec, cfg=None):
    """Symmetric cloud-to-plane distance to tangent planes at the nearest points.

    Tangent planes use PCA normals of each reference cloud with
    ``cfg.c2p_normal_k`` neighbors.
    """
    cfg = cfg or MetricsConfig()
    a, b = _points(gt), _points(rec)
    na = pca_normals(a, cfg.c2p_normal_k)
    nb = pca_normals(b, cfg.c2p_normal_k)
    return float(max(_directed_c2p(a, b, nb), _directed_c2p(b, a, na)))


def relative_error(L, L_B):
    """Frobenius relative error ``||L - L_B|| / ||L||``."""
    L = sp.csr_matrix(L, dtype=float)
    L_B = sp.csr_matrix(L_B, dtype=float)
    if L.shape != L_B.shape:
        raise ValueError("dimension mismatch")
    denom = sp.linalg.norm(L)
    if denom == 0:
        raise ValueError("relative error undefined for a zero matrix")
    return float(sp.linalg.norm(L - L_B) / denom)


def _similarity_system(g, eps):
    A = g.adjacency()
    deg = np.asarray(abs(A).sum(axis=1)).ravel()
    return (sp.identity(g.n) + sp.diags(eps**2 * deg) - eps * A).tocsr()


def _similarity(M):
    n = M.shape[0]
    if n <= DENSE_LIMIT:
        dense = M.toarray()
        try:
            np.linalg.cholesky(dense)
        except np.linalg.LinAlgError:
            raise ContractError("similarity system is not positive definite") from None
        return np.linalg.inv(dense)
    lam, _ = smallest_eigpair(M)
    if lam <= 0:
        raise ContractError("similarity system is not positive definite")
    return splu(M.tocsc()).solve(np.eye(n))


def max_abs_degree(g):
    return float(np.asarray(abs(g.adjacency()).sum(axis=1)).max(initial=0.0))


def deltacon_similarity(gA, gB, cfg=None):
    """DELTACON similarity ``1 / (1 + d)`` with the Matusita distance ``d`` of node affinities.

    Affinities are ``(I + eps^2 D - eps A)^-1`` with absolute degrees ``D``;
    negative entries are clamped to zero before the square roots.
    """
    if gA.n != gB.n:
        raise ValueError("graphs must have the same node count")
    cfg = cfg or MetricsConfig()
    eps = cfg.dcs_epsilon
    if eps is None:
        eps = 1.0 / (1.0 + max(max_abs_degree(gA), max_abs_degree(gB)))
    SA = _similarity(_similarity_system(gA, eps))
    SB = _similarity(_similarity_system(gB, eps))
    d = np.sqrt(np.sum((np.sqrt(np.clip(SA, 0, None)) - np.sqrt(np.clip(SB, 0, None))) ** 2))
    return float(1.0 / (1.0 + d))


def system_matrix(sampling, Lcal, mu, group_size=3):
    """``H^T H + mu L`` for a sample set over groups of ``group_size`` rows."""
    Lcal = sp.csr_matrix(Lcal, dtype=float)
    hth = sampling.hth_diagonal(group_size)
    if hth.shape[0] != Lcal.shape[0]:
        raise ValueError("sampling set and matrix dimensions disagree")
    return (sp.diags(hth) + mu * Lcal).tocsr()


def lambda_min_report(sampling, Lcal, mu, group_size=3):
    """Smallest eigenvalue of ``H^T H + mu L`` (dense up to dimension 500)."""
    B = system_matrix(sampling, Lcal, mu, group_size)
    if B.shape[0] <= DENSE_LIMIT:
        return float(np.linalg.eigvalsh(B.toarray())[0])
    return float(smallest_eigpair(B, tol=1e-10)[0])


def balancing_scores(g, g_B, cfg=None):
    """Relative Laplacian error and DELTACON similarity of a balanced approximation."""
    return relative_error(laplacian(g), laplacian(g_B)), deltacon_similarity(g, g_B, cfg)

