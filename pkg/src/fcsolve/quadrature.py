"""Polar quadrature rules used for kernels with a point singularity."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(n)
    return (t + 1) / 2, w / 2


def sphere_rule(d: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Directions and weights on S^{d-1}; trapezoid in longitude, Gauss-Legendre in cos(polar)."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        th = 2 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(2 * n, np.pi / n)
    if d == 3:
        u, wu = np.polynomial.legendre.leggauss(n)
        ph = 2 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
        U, PH = np.meshgrid(u, ph, indexing="ij")
        s = np.sqrt(1 - U ** 2)
        dirs = np.stack([s * np.cos(PH), s * np.sin(PH), U], axis=-1).reshape(-1, 3)
        w = (wu[:, None] * np.full(2 * n, np.pi / n)[None, :]).reshape(-1)
        return dirs, w
    raise NotImplementedError("sphere rules are provided for d <= 3")


def ball_rule(d: int, radius: float = 1.0, n: int = 12, center=None) -> tuple[np.ndarray, np.ndarray]:
    """Polar Gauss-Legendre rule on a ball (exact for low-degree polynomials)."""
    dirs, wd = sphere_rule(d, n)
    r, wr = gauss_legendre(n)
    r = r * radius
    wr = wr * radius * r ** (d - 1)
    pts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    w = (wr[:, None] * wd[None, :]).reshape(-1)
    if center is not None:
        pts = pts + np.asarray(center, dtype=float)
    return pts, w
