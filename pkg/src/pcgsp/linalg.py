"""Sparse symmetric kernels: CG, smallest eigenpair, Lanczos filtering, Gershgorin discs."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, splu

from .errors import SolverError

DENSE_CAP = 500
# below this dimension the smallest eigenpair comes from LAPACK and is certified minimal
EXACT_EIGPAIR_LIMIT = 1000


def _as_operator(M):
    if sp.issparse(M):
        return M.tocsr()
    return np.asarray(M, dtype=float)


def symmetrize(M):
    """Exactly symmetric CSR copy of a numerically symmetric matrix."""
    M = sp.csr_matrix(M, dtype=float)
    S = (M + M.T) * 0.5
    S.sum_duplicates()
    S.eliminate_zeros()
    return S.tocsr()


# ---------------------------------------------------------------------- CG


def cg_solve(M, rhs, tol=1e-8, max_iter=None, x0=None):
    """Conjugate gradient for a symmetric positive definite system.

    Parameters
    ----------
    M : sparse or dense (d, d)
    rhs : (d,) array
    tol : float
        Relative residual target ``||Mx - rhs|| <= tol * ||rhs||``.
    max_iter : int, optional
        Defaults to ``10 * d``.

    Raises
    ------
    SolverError
        If the iteration cap is hit; carries the final relative residual.
    """
    M = _as_operator(M)
    b = np.asarray(rhs, dtype=float)
    d = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(d, 1)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - M @ x
    rr = r @ r
    target = (tol * bnorm) ** 2
    if rr <= target:
        return x
    p = r.copy()
    for _ in range(max_iter):
        Mp = M @ p
        curv = p @ Mp
        if curv <= 0:
            raise SolverError("matrix is not positive definite along a CG direction",
                              residual=np.sqrt(rr) / bnorm)
        step = rr / curv
        x += step * p
        r -= step * Mp
        rr_new = r @ r
        if rr_new <= target:
            # confirm against the true residual; recurrences drift on hard systems
            true_r = b - M @ x
            if true_r @ true_r <= target * 1.0001:
                return x
            r = true_r
            rr_new = r @ r
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = np.linalg.norm(b - M @ x) / bnorm
    if res <= tol:
        return x
    raise SolverError(f"CG did not converge in {max_iter} iterations", residual=res)


# ---------------------------------------------------------------- Gershgorin


@dataclass(frozen=True)
class Discs:
    centers: np.ndarray
    radii: np.ndarray

    @property
    def left_ends(self):
        return self.centers - self.radii

    @property
    def right_ends(self):
        return self.centers + self.radii


def gershgorin_discs(M):
    if sp.issparse(M):
        M = M.tocsr()
        centers = M.diagonal().astype(float)
        radii = np.asarray(abs(M).sum(axis=1)).ravel() - np.abs(centers)
    else:
        M = np.asarray(M, dtype=float)
        centers = np.diag(M).copy()
        radii = np.abs(M).sum(axis=1) - np.abs(centers)
    return Discs(centers, np.maximum(radii, 0.0))


def gershgorin_bounds(M):
    """Discs plus the interval ``[min(c - r), max(c + r)]`` holding every eigenvalue."""
    discs = gershgorin_discs(M)
    return discs, float(discs.left_ends.min()), float(discs.right_ends.max())


# ---------------------------------------------------------- smallest eigpair


def _fix_sign(v):
    v = v / np.linalg.norm(v)
    nz = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def _rayleigh_ritz(M, basis):
    Q, R = np.linalg.qr(basis)
    # drop directions that became numerically dependent
    Q = Q[:, np.abs(np.diag(R)) > 1e-12]
    MQ = M @ Q
    small = Q.T @ MQ
    small = (small + small.T) / 2
    vals, vecs = np.linalg.eigh(small)
    return vals[0], Q @ vecs[:, 0], Q, vecs[:, 0]


def _shift_invert(M, shift, v0, tol):
    """Smallest eigenpair near ``shift`` by shift-invert Lanczos (robust to eigenvalue clusters)."""
    d = M.shape[0]
    A = sp.csc_matrix(M) if sp.issparse(M) else sp.csc_matrix(np.asarray(M))
    try:
        vals, vecs = eigsh(A, k=1, sigma=shift, which="LM", v0=v0, tol=1e-12, ncv=min(d, 40))
    except (ArpackNoConvergence, RuntimeError) as exc:
        raise SolverError(f"shift-invert Lanczos failed: {exc}") from None
    lam, v = float(vals[0]), vecs[:, 0]
    res = float(np.linalg.norm(M @ v - lam * v))
    if res > tol:
        raise SolverError("smallest eigenpair did not reach the residual tolerance",
                          residual=res, lambda_min=lam)
    return lam, v


def eigenvalues_below(M, sigma):
    """Number of eigenvalues of symmetric ``M`` below ``sigma`` by Sylvester inertia.

    Counts negative pivots of an unpivoted sparse LDL^T of ``M - sigma I``.
    Returns None when the factorization needed off-diagonal pivoting or hit a
    zero pivot, since the count is then not certified.
    """
    d = M.shape[0]
    A = (sp.csc_matrix(M) - sigma * sp.identity(d, format="csc")).tocsc()
    try:
        lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options=dict(SymmetricMode=True))
    except RuntimeError:
        return None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        return None
    pivots = lu.U.diagonal()
    if np.any(pivots == 0):
        return None
    return int(np.sum(pivots < 0))


def _certify_minimal(M, lam, x, tol, lower, scale):
    """Replace an interior eigenpair by the smallest one, located by inertia bisection."""
    margin = max(tol, 1e-12 * scale)
    hi = lam - margin
    count = eigenvalues_below(M, hi)
    if count is None or count == 0:
        return lam, x
    lo = min(lower, hi) - margin
    for _ in range(60):
        if count == 1:
            break
        mid = 0.5 * (lo + hi)
        c = eigenvalues_below(M, mid)
        if c is None:
            break
        if c == 0:
            lo = mid
        else:
            hi, count = mid, c
    # exactly one eigenvalue lies in (lo, hi], so it is the one nearest lo
    return _shift_invert(M, lo, None, tol)


def smallest_eigpair(M, tol=1e-8, max_iter=None, seed=0):
    """Smallest eigenvalue and unit eigenvector of a symmetric matrix.

    Up to ``EXACT_EIGPAIR_LIMIT`` rows the pair comes from a LAPACK subset
    solve. Larger matrices use single-vector LOBPCG with a Jacobi
    preconditioner; if it stagnates, the estimate seeds shift-invert Lanczos
    just below it. The iterative result is then certified minimal by an
    inertia count, and replaced via inertia bisection when it is an interior
    pair. The sign of the returned vector makes its first nonzero component
    positive.

    Returns
    -------
    lam : float
    v : (d,) array with ``||Mv - lam v|| <= tol``
    """
    M = _as_operator(M)
    d = M.shape[0]
    if d == 1:
        return float(M[0, 0]), np.ones(1)
    if d <= EXACT_EIGPAIR_LIMIT:
        dense = M.toarray() if sp.issparse(M) else M
        vals, vecs = sla.eigh((dense + dense.T) / 2, subset_by_index=[0, 0], driver="evr")
        lam, v = float(vals[0]), vecs[:, 0]
        res = float(np.linalg.norm(M @ v - lam * v))
        if res > tol:
            raise SolverError("smallest eigenpair did not reach the residual tolerance",
                              residual=res, lambda_min=lam)
        return lam, _fix_sign(v)
    if max_iter is None:
        max_iter = max(200, 4 * d)
    _, lower, upper = gershgorin_bounds(M)
    scale = max(abs(lower), abs(upper), 1e-300)
    diag = M.diagonal() if sp.issparse(M) else np.diag(M)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    lam = x @ (M @ x)
    p = None
    best_res = np.inf
    stall = 0
    for _ in range(max_iter):
        Mx = M @ x
        lam = x @ Mx
        r = Mx - lam * x
        res = np.linalg.norm(r)
        if res <= tol:
            lam, x = _certify_minimal(M, float(lam), x, tol, lower, scale)
            return float(lam), _fix_sign(x)
        if res < 0.9 * best_res:
            best_res, stall = res, 0
        else:
            stall += 1
            if stall > 50:
                break
        denom = diag - lam
        denom = np.where(np.abs(denom) < 1e-8 * scale, 1e-8 * scale, np.abs(denom))
        w = r / denom
        cols = [x, w] if p is None else [x, w, p]
        basis = np.column_stack(cols)
        basis /= np.linalg.norm(basis, axis=0)
        try:
            lam, x_new, _, _ = _rayleigh_ritz(M, basis)
        except np.linalg.LinAlgError:
            break
        # implicit search direction: new iterate minus its component along x
        p = x_new - (x @ x_new) * x
        pn = np.linalg.norm(p)
        p = p / pn if pn > 1e-14 else None
        x = x_new / np.linalg.norm(x_new)
    shift = lam - 1e-6 * scale
    lam, v = _shift_invert(M, shift, x, tol)
    lam, v = _certify_minimal(M, lam, v, tol, lower, scale)
    return lam, _fix_sign(v)


def power_lambda_max(M, iters=50, seed=0):
    """Power-iteration estimate of the largest eigenvalue of a PSD matrix."""
    M = _as_operator(M)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(M.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = M @ x
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        lam = x @ y
        x = y / ny
    return float(max(lam, x @ (M @ x)))


# ------------------------------------------------------------------ dense


@dataclass(frozen=True)
class DenseEigDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def response(self, gamma):
        """Low-pass spectral response ``1 / (1 + gamma * mu_i)``."""
        return 1.0 / (1.0 + gamma * self.eigenvalues)

    def reconstruct(self):
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


def dense_eig(M):
    M = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    if M.shape[0] > DENSE_CAP:
        raise ValueError(f"dense eigendecomposition capped at dimension {DENSE_CAP}")
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    return DenseEigDecomposition(vals, vecs)


def gsf_solve(L, q, gamma):
    """Solve ``(I + gamma L) p = q`` by filtering ``q`` in the eigenbasis of ``L``."""
    q = np.asarray(q, dtype=float)
    if gamma == 0:
        return q.copy()
    eig = dense_eig(L)
    coeffs = eig.eigenvectors.T @ q
    return eig.eigenvectors @ (coeffs * eig.response(gamma))


# ---------------------------------------------------------------- Lanczos


@numba.njit(cache=True)
def _tql(diag, off, z):
    """Implicit-shift QL on a symmetric tridiagonal matrix.

    ``z`` is rotated in place: pass the identity for full eigenvectors or a
    single row (e.g. e_1^T) to track only that row of the eigenvector matrix.
    """
    n = diag.shape[0]
    d = diag.copy()
    e = np.zeros(n)
    e[: n - 1] = off
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= 1e-15 * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > 60:
                return d, False
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                for k in range(z.shape[0]):
                    f = z[k, i + 1]
                    z[k, i + 1] = s * z[k, i] + c * f
                    z[k, i] = c * z[k, i] - s * f
                i -= 1
            if underflow and i >= l:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return d, True


def tridiagonal_eigh(diag, off, first_row_only=False):
    """Eigenvalues and eigenvectors (or their first row) of a symmetric tridiagonal matrix."""
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    n = diag.shape[0]
    z = np.zeros((1, n)) if first_row_only else np.eye(n)
    if first_row_only:
        z[0, 0] = 1.0
    if n == 1:
        return diag.copy(), z
    vals, ok = _tql(diag, off, z)
    if not ok:
        raise SolverError("tridiagonal QL iteration did not converge")
    order = np.argsort(vals, kind="stable")
    return vals[order], z[:, order]


@dataclass(frozen=True)
class LanczosBasis:
    basis: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray

    @property
    def order(self):
        return self.basis.shape[1]

    def tridiagonal(self):
        return np.diag(self.alphas) + np.diag(self.betas, 1) + np.diag(self.betas, -1)


def lanczos(L, q, order):
    """Orthonormal Krylov basis of ``K_order(L, q)`` with full reorthogonalization.

    Stops early on breakdown, so the returned order may be smaller than requested.
    """
    L = _as_operator(L)
    q = np.asarray(q, dtype=float)
    d = q.shape[0]
    order = min(int(order), d)
    V = np.zeros((d, order))
    alphas = np.zeros(order)
    betas = np.zeros(max(order - 1, 0))
    qn = np.linalg.norm(q)
    V[:, 0] = q / qn
    k = order
    for j in range(order):
        w = L @ V[:, j]
        alphas[j] = V[:, j] @ w
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        if j == order - 1:
            break
        beta = np.linalg.norm(w)
        if beta <= 1e-12 * max(1.0, abs(alphas[: j + 1]).max()):
            k = j + 1
            break
        betas[j] = beta
        V[:, j + 1] = w / beta
    return LanczosBasis(V[:, :k], alphas[:k], betas[: k - 1])


def lanczos_filter(L, q, gamma, order):
    """Approximate ``(I + gamma L)^{-1} q`` as ``||q|| V (I + gamma H)^{-1} e_1``."""
    q = np.asarray(q, dtype=float)
    if gamma < 0 or order < 1:
        raise ValueError("need gamma >= 0 and order >= 1")
    qn = np.linalg.norm(q)
    if qn == 0:
        return np.zeros_like(q)
    lb = lanczos(L, q, order)
    vals, Z = tridiagonal_eigh(lb.alphas, lb.betas)
    # G(H) e_1 = Z diag(1 / (1 + gamma theta)) Z^T e_1
    y = Z @ (Z[0] / (1.0 + gamma * vals))
    return qn * (lb.basis @ y)


# -------------------------------------------------------- condition bound


@dataclass(frozen=True)
class SpectralBounds:
    rho_max: float
    min_geom: float


def condition_bound(gamma, bounds):
    """Upper bound ``1 + 6 gamma rho_max / min_geom`` on cond(I + gamma A^T L A)."""
    if bounds.min_geom <= 0:
        raise ValueError("min_geom must be positive")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return 1.0 + 6.0 * gamma * bounds.rho_max / bounds.min_geom
