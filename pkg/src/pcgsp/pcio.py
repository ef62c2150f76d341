"""Point-cloud data model, file I/O, neighbor search, noise and K-means sub-clouds."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError

EXHAUSTIVE_LIMIT = 256
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class PointCloud:
    """Immutable 3D point set with optional unit normals.

    Parameters
    ----------
    points : (n, 3) array
    normals : (n, 3) array or None
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise ValueError("normals must align with points")
            if nrm.size and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-9:
                raise ValueError("normals must have unit norm")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    def with_normals(self, normals):
        return PointCloud(self.points, normals)

    def subset(self, index):
        index = np.asarray(index)
        nrm = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], nrm)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class SubCloudPartition:
    """Cluster labels of a K-means split.

    ``objective_history`` holds the within-cluster sum of squares after each
    Lloyd update, which never increases.
    """

    cluster_of: np.ndarray
    cluster_count: int
    target_points_per_cluster: int
    objective_history: tuple = field(default=())

    def members(self, c):
        return np.flatnonzero(self.cluster_of == c)


# --------------------------------------------------------------------------- IO


def _detect_format(path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("ply", "xyz"):
            raise ValueError(f"unsupported format {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    return "ply" if suffix == ".ply" else "xyz"


def _parse_floats(tokens, lineno, expected):
    if len(tokens) != expected:
        raise ParseError(f"expected {expected} values, got {len(tokens)}", lineno)
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"non-numeric field ({exc})", lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", lineno)
    return vals


def _load_xyz(lines):
    rows = []
    width = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if width is None:
            if len(tokens) not in (3, 6):
                raise ParseError("XYZ rows need 3 (x y z) or 6 (x y z nx ny nz) values", lineno)
            width = len(tokens)
        rows.append(_parse_floats(tokens, lineno, width))
    if not rows:
        return PointCloud(np.zeros((0, 3)))
    data = np.array(rows)
    normals = _unit_or_none(data[:, 3:6]) if width == 6 else None
    return PointCloud(data[:, :3], normals)


def _unit_or_none(normals):
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(lengths == 0):
        return None
    # text round-off can leave |n| a few ulps away from 1
    return normals / lengths


def _load_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    vertex_count = None
    props = []
    in_vertex = False
    header_end = None
    fmt_seen = False
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        key = tokens[0]
        if key in ("comment", "obj_info"):
            continue
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError("only ascii PLY is supported", lineno)
            fmt_seen = True
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    vertex_count = int(tokens[2])
                except ValueError:
                    raise ParseError("vertex count is not an integer", lineno) from None
        elif key == "property":
            if in_vertex:
                if len(tokens) != 3 or tokens[1] == "list":
                    raise ParseError("unsupported vertex property", lineno)
                props.append(tokens[2])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unknown header keyword {key!r}", lineno)
    if header_end is None:
        raise ParseError("missing end_header", len(lines))
    if not fmt_seen:
        raise ParseError("missing format line", header_end)
    if vertex_count is None:
        raise ParseError("missing vertex element", header_end)
    for name in ("x", "y", "z"):
        if name not in props:
            raise ParseError(f"vertex property {name!r} missing", header_end)
    has_normals = all(name in props for name in ("nx", "ny", "nz"))

    rows = []
    lineno = header_end
    for raw in lines[header_end:]:
        lineno += 1
        if not raw.strip():
            continue
        if len(rows) == vertex_count:
            raise ParseError("more vertex rows than declared", lineno)
        rows.append(_parse_floats(raw.split(), lineno, len(props)))
    if len(rows) != vertex_count:
        raise ParseError(f"declared {vertex_count} vertices, found {len(rows)}", lineno)
    data = np.array(rows).reshape(-1, len(props))
    col = {name: i for i, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if has_normals:
        normals = _unit_or_none(data[:, [col["nx"], col["ny"], col["nz"]]])
    return PointCloud(pts, normals)


def load_cloud(path, fmt=None):
    """Read an ascii PLY or XYZ file.

    Raises
    ------
    ParseError
        On malformed headers, non-numeric fields, non-finite coordinates or a
        vertex count mismatch; the message names the offending line.
    """
    fmt = _detect_format(path, fmt)
    lines = Path(path).read_text().splitlines()
    return _load_ply(lines) if fmt == "ply" else _load_xyz(lines)


def save_cloud(cloud, path, fmt=None):
    fmt = _detect_format(path, fmt)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in data)
    if fmt == "ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        header += [f"property double {c}" for c in ("x", "y", "z")]
        if cloud.normals is not None:
            header += [f"property double {c}" for c in ("nx", "ny", "nz")]
        header.append("end_header")
        text = "\n".join(header) + "\n" + body
    else:
        text = body
    Path(path).write_text(text + "\n" if body else text)


# ---------------------------------------------------------------- neighbors


def _sorted_neighbors(points, cand, k):
    """Order candidate lists by (distance, index) and keep the first k non-self."""
    n = points.shape[0]
    rows = np.arange(n)[:, None]
    d2 = np.sum((points[cand] - points[:, None, :]) ** 2, axis=2)
    d2 = np.where(cand == rows, np.inf, d2)
    order = np.lexsort((cand, d2), axis=-1)[:, :k]
    return np.take_along_axis(np.asarray(cand), order, axis=1).astype(np.int64)


def knn_search(cloud_or_points, k):
    """k nearest neighbors of every point, excluding the point itself.

    Distances are Euclidean; ties are broken by the smaller index so results
    are deterministic. Clouds with at most 256 points use an exhaustive scan,
    larger ones a k-d tree.

    Returns
    -------
    (n, k) int array, each row sorted by nondecreasing distance.
    """
    points = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else np.asarray(cloud_or_points, float)
    n = points.shape[0]
    k = int(k)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    if n <= EXHAUSTIVE_LIMIT:
        cand = np.broadcast_to(np.arange(n), (n, n))
        return _sorted_neighbors(points, cand, k)
    tree = cKDTree(points)
    # a few spare candidates so boundary ties and duplicate points resolve by index
    extra = min(n, k + 4)
    _, cand = tree.query(points, k=extra)
    return _sorted_neighbors(points, np.asarray(cand, dtype=np.int64), k)


def nearest_in(reference, queries):
    """Distance and index of the closest ``reference`` point for each query."""
    ref = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, float)
    qry = queries.points if isinstance(queries, PointCloud) else np.asarray(queries, float)
    dist, idx = cKDTree(ref).query(qry, k=1)
    return np.asarray(dist), np.asarray(idx)


# ------------------------------------------------------------------- noise


def add_gaussian_noise(cloud, model):
    if model.sigma == 0:
        return cloud
    rng = np.random.default_rng(model.seed)
    noisy = cloud.points + rng.normal(0.0, model.sigma, size=cloud.points.shape)
    return PointCloud(noisy)


def normalize_diagonal(cloud, diagonal=1.0):
    """Center the cloud and scale it so its bounding-box diagonal equals ``diagonal``."""
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diag = np.linalg.norm(hi - lo)
    if diag == 0:
        return PointCloud(pts - lo, cloud.normals)
    return PointCloud((pts - (lo + hi) / 2) * (diagonal / diag), cloud.normals)


def bounding_diagonal(points):
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


# ------------------------------------------------------------------ K-means


def _kmeans_pp(points, c, rng):
    n = points.shape[0]
    centers = np.empty((c, 3))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for t in range(1, c):
        total = d2.sum()
        if total <= 0:
            centers[t] = points[rng.integers(n)]
        else:
            centers[t] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[t]) ** 2, axis=1))
    return centers


def _assign(points, centers):
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


def kmeans_partition(cloud, M, seed=0):
    """Split a cloud into ``max(1, round(n / M))`` spatial clusters.

    k-means++ seeding followed by Lloyd iterations until the assignment stops
    changing (cap 100). Empty clusters are re-seeded with the point farthest
    from its center.
    """
    points = cloud.points
    n = points.shape[0]
    if n < 1 or M < 1:
        raise ValueError("need n >= 1 and M >= 1")
    c = max(1, int(round(n / M)))
    c = min(c, n)
    if c == 1:
        labels = np.zeros(n, dtype=np.int64)
        sse = float(np.sum((points - points.mean(axis=0)) ** 2))
        return SubCloudPartition(labels, 1, int(M), (sse,))

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, c, rng)
    labels, d2 = _assign(points, centers)
    history = []
    for _ in range(KMEANS_MAX_ITER):
        for t in range(c):
            members = labels == t
            if members.any():
                centers[t] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(d2))
                centers[t] = points[far]
                labels[far] = t
                d2[far] = 0.0
        history.append(float(np.sum((points - centers[labels]) ** 2)))
        new_labels, d2 = _assign(points, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    # a fixpoint can still leave a cluster empty when c is close to n
    for t in range(c):
        if not np.any(labels == t):
            far = int(np.argmax(np.sum((points - centers[labels]) ** 2, axis=1)))
            labels[far] = t
    return SubCloudPartition(labels.astype(np.int64), c, int(M), tuple(history))
