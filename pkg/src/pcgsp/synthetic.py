"""Synthetic plane, sphere and cube surface clouds with controllable spacing and noise."""

from __future__ import annotations

import numpy as np

from .pcio import PointCloud

SHAPES = ("plane", "sphere", "cube")


def plane(n, spacing=1.0, jitter=0.3, seed=0):
    """Jittered square grid on ``z = 0`` with mean spacing ``spacing``."""
    side = int(np.ceil(np.sqrt(n)))
    g = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2)[:n]
    rng = np.random.default_rng(seed)
    xy = (g + jitter * rng.uniform(-1.0, 1.0, g.shape)) * spacing
    return np.column_stack([xy, np.zeros(n)])


def sphere(n, spacing=1.0, seed=0):
    """Fibonacci sphere whose radius gives a mean spacing of about ``spacing``."""
    radius = spacing * np.sqrt(n / (4.0 * np.pi))
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i + np.random.default_rng(seed).uniform(0, 2 * np.pi)
    r = np.sqrt(1.0 - z**2)
    return radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def cube(n, spacing=1.0, seed=0):
    """Points on the six faces of an axis-aligned cube, face grids at cell centers."""
    g = int(np.ceil(np.sqrt(n / 6.0)))
    side = g * spacing
    u = (np.arange(g) + 0.5) * spacing
    uu, vv = (a.ravel() for a in np.meshgrid(u, u, indexing="ij"))
    faces = []
    for axis in range(3):
        for level in (0.0, side):
            f = np.empty((g * g, 3))
            others = [a for a in range(3) if a != axis]
            f[:, axis] = level
            f[:, others[0]] = uu
            f[:, others[1]] = vv
            faces.append(f)
    pts = np.vstack(faces)
    keep = np.sort(np.random.default_rng(seed).permutation(len(pts))[:n])
    return pts[keep]


def cube_edge_mask(points, side, width):
    """Points within ``width`` of at least two cube faces (the cube's edges)."""
    pts = np.asarray(points, dtype=float)
    near = (np.abs(pts) <= width) | (np.abs(pts - side) <= width)
    return near.sum(axis=1) >= 2


def make_cloud(shape, n, sigma=0.0, seed=0, spacing=1.0):
    """Clean and noisy copies of a synthetic shape.

    Returns
    -------
    clean, noisy : PointCloud
        ``noisy`` adds i.i.d. Gaussian noise of standard deviation ``sigma``.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if n < 4:
        raise ValueError("need at least 4 points")
    if sigma < 0 or spacing <= 0:
        raise ValueError("sigma must be non-negative and spacing positive")
    gen = {"plane": plane, "sphere": sphere, "cube": cube}[shape]
    pts = gen(n, spacing=spacing, seed=seed)
    noise = np.random.default_rng(seed + 7919).normal(0.0, sigma, pts.shape)
    return PointCloud(pts), PointCloud(pts + noise)
