"""Quadrature rules on tetrahedra and triangles.

Rules are returned in barycentric form: ``(bary, weights)`` with weights
summing to one, so a physical integral is ``measure * sum(w * f(x))``.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import permutations

import numpy as np
from scipy.special import roots_jacobi


def _orbit(*coords):
    return np.array(sorted(set(permutations(coords))), dtype=float)


@lru_cache(maxsize=None)
def _conical_tet(n: int):
    # Stroud collapsed Gauss-Jacobi product rule, exact to degree 2n-1.
    x1, w1 = roots_jacobi(n, 2, 0)
    x2, w2 = roots_jacobi(n, 1, 0)
    x3, w3 = roots_jacobi(n, 0, 0)
    a, b, c = (x1 + 1) / 2, (x2 + 1) / 2, (x3 + 1) / 2
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = np.einsum("i,j,k->ijk", w1, w2, w3)
    l1 = A
    l2 = (1 - A) * B
    l3 = (1 - A) * (1 - B) * C
    l0 = 1 - l1 - l2 - l3
    bary = np.stack([l0, l1, l2, l3], axis=-1).reshape(-1, 4)
    w = W.ravel()
    return bary, w / w.sum()


@lru_cache(maxsize=None)
def tet_rule(degree: int):
    """Barycentric points ``(n, 4)`` and weights ``(n,)`` on a tetrahedron."""
    if degree <= 1:
        return np.full((1, 4), 0.25), np.ones(1)
    if degree == 2:
        a, b = 0.1381966011250105, 0.5854101966249685
        return _orbit(b, a, a, a), np.full(4, 0.25)
    if degree in (4, 5):
        # 14-point positive rule of degree 5.
        p1 = _orbit(0.4544962958743504, 0.4544962958743504,
                    0.0455037041256496, 0.0455037041256496)
        a2 = 0.0927352503108912
        p2 = _orbit(1 - 3 * a2, a2, a2, a2)
        a3 = 0.3108859192633006
        p3 = _orbit(1 - 3 * a3, a3, a3, a3)
        w = np.concatenate([np.full(6, 0.007091003462846911),
                            np.full(4, 0.01224884051939366),
                            np.full(4, 0.01878132095300264)]) * 6
        return np.vstack([p1, p2, p3]), w / w.sum()
    return _conical_tet((degree + 2) // 2)


@lru_cache(maxsize=None)
def _conical_tri(n: int):
    x1, w1 = roots_jacobi(n, 1, 0)
    x2, w2 = roots_jacobi(n, 0, 0)
    a, b = (x1 + 1) / 2, (x2 + 1) / 2
    A, B = np.meshgrid(a, b, indexing="ij")
    W = np.outer(w1, w2)
    l1 = A
    l2 = (1 - A) * B
    l0 = 1 - l1 - l2
    bary = np.stack([l0, l1, l2], axis=-1).reshape(-1, 3)
    w = W.ravel()
    return bary, w / w.sum()


@lru_cache(maxsize=None)
def tri_rule(degree: int):
    """Barycentric points ``(n, 3)`` and weights ``(n,)`` on a triangle."""
    if degree <= 1:
        return np.full((1, 3), 1 / 3), np.ones(1)
    if degree == 2:
        return _orbit(2 / 3, 1 / 6, 1 / 6), np.full(3, 1 / 3)
    if degree in (3, 4, 5):
        a1, b1 = 0.4701420641051151, 0.0597158717897698
        a2, b2 = 0.1012865073234563, 0.7974269853530873
        pts = np.vstack([np.full((1, 3), 1 / 3), _orbit(b1, a1, a1), _orbit(b2, a2, a2)])
        w = np.concatenate([[0.225], np.full(3, 0.1323941527885062),
                            np.full(3, 0.1259391805448271)])
        return pts, w / w.sum()
    return _conical_tri((degree + 2) // 2)


def map_points(bary: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Map barycentric points onto simplices ``verts`` of shape ``(..., k, 3)``.

    Returns an array of shape ``(..., npts, 3)``.
    """
    return np.einsum("pk,...kd->...pd", bary, verts)


def tet_volumes(verts: np.ndarray) -> np.ndarray:
    """Signed volumes of tetrahedra ``(..., 4, 3)``."""
    e1 = verts[..., 1, :] - verts[..., 0, :]
    e2 = verts[..., 2, :] - verts[..., 0, :]
    e3 = verts[..., 3, :] - verts[..., 0, :]
    return np.einsum("...i,...i->...", e1, np.cross(e2, e3)) / 6.0


def tri_areas(verts: np.ndarray) -> np.ndarray:
    n = np.cross(verts[..., 1, :] - verts[..., 0, :], verts[..., 2, :] - verts[..., 0, :])
    return 0.5 * np.linalg.norm(n, axis=-1)


def tet_subdivide(verts: np.ndarray, levels: int = 1) -> np.ndarray:
    """Split tetrahedra ``(..., 4, 3)`` into ``8**levels`` children each.

    Returns ``(..., 8**levels, 4, 3)``; children keep positive orientation.
    """
    out = verts[..., None, :, :]
    for _ in range(levels):
        v = out
        m = lambda i, j: 0.5 * (v[..., i, :] + v[..., j, :])  # noqa: E731
        v0, v1, v2, v3 = (v[..., i, :] for i in range(4))
        m01, m02, m03, m12, m13, m23 = m(0, 1), m(0, 2), m(0, 3), m(1, 2), m(1, 3), m(2, 3)
        kids = [
            (v0, m01, m02, m03), (m01, v1, m12, m13), (m02, m12, v2, m23), (m03, m13, m23, v3),
            (m01, m02, m03, m13), (m01, m02, m12, m13), (m02, m03, m13, m23), (m02, m12, m13, m23),
        ]
        stacked = np.stack([np.stack(k, axis=-2) for k in kids], axis=-3)
        vol = tet_volumes(stacked)
        flip = vol < 0
        if np.any(flip):
            sw = stacked[..., [1, 0, 2, 3], :]
            stacked = np.where(flip[..., None, None], sw, stacked)
        out = stacked.reshape(*stacked.shape[:-4], -1, 4, 3)
    return out


def tri_subdivide(verts: np.ndarray, levels: int = 1) -> np.ndarray:
    """Split triangles ``(..., 3, 3)`` into ``4**levels`` children each."""
    out = verts[..., None, :, :]
    for _ in range(levels):
        v0, v1, v2 = (out[..., i, :] for i in range(3))
        m01, m12, m02 = 0.5 * (v0 + v1), 0.5 * (v1 + v2), 0.5 * (v0 + v2)
        kids = [(v0, m01, m02), (m01, v1, m12), (m02, m12, v2), (m01, m12, m02)]
        stacked = np.stack([np.stack(k, axis=-2) for k in kids], axis=-3)
        out = stacked.reshape(*stacked.shape[:-4], -1, 3, 3)
    return out


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Euclidean distance from points ``(..., 3)`` to triangles ``(..., 3, 3)``."""
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    d = np.sum((p - a) * n, axis=-1)
    proj = p - d[..., None] * n
    inside = np.ones(d.shape, dtype=bool)
    for u, v in ((a, b), (b, c), (c, a)):
        inside &= np.sum(np.cross(v - u, proj - u) * n, axis=-1) >= 0

    def seg(u, v):
        e = v - u
        t = np.clip(np.sum((p - u) * e, axis=-1) / np.sum(e * e, axis=-1), 0.0, 1.0)
        return np.linalg.norm(p - (u + t[..., None] * e), axis=-1)

    edge = np.minimum(np.minimum(seg(a, b), seg(b, c)), seg(c, a))
    return np.where(inside, np.abs(d), edge)
