"""Closed-form static potentials of flat triangles and tetrahedra.

Used to integrate the ``1/R`` part of the scalar Green's function over
source elements that touch or nearly touch the observation element. The
triangle formulas follow the classic edge-by-edge reduction; the
tetrahedron integrals are reduced to face integrals by the divergence
theorem:

    int_T 1/R dV'        = 1/2 sum_f d_f int_f 1/R dS'
    int_T (r'-r)/R dV'   = sum_f n_f int_f R dS'

with ``d_f`` the signed distance from ``r`` to face ``f`` along its outward
normal ``n_f``.
"""

from __future__ import annotations

import numpy as np

_TINY = 1e-13

# faces opposite vertices 0..3, ordered so that the normal points outward
# for a positively oriented tetrahedron
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _log_ratio(Rp, lp, Rm, lm, R0sq):
    # ln((R+ + l+)/(R- + l-)) without cancellation for negative l
    num = np.where(lp >= 0, Rp + lp, R0sq / np.maximum(Rp - lp, _TINY))
    den = np.where(lm >= 0, Rm + lm, R0sq / np.maximum(Rm - lm, _TINY))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(num / den)
    return np.where(np.isfinite(out), out, 0.0)


def triangle_potentials(r, v0, v1, v2):
    """Return ``(int 1/R dS', int R dS')`` over triangle ``(v0, v1, v2)``.

    All arguments broadcast against each other with a trailing axis of 3.
    """
    r = np.asarray(r, dtype=float)
    verts = np.broadcast_arrays(np.asarray(v0, float), np.asarray(v1, float), np.asarray(v2, float))
    nvec = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    scale = np.linalg.norm(nvec, axis=-1, keepdims=True)
    n = nvec / scale
    d = np.sum((r - verts[0]) * n, axis=-1)
    ad = np.abs(d)
    rho = r - d[..., None] * n
    size = np.sqrt(scale[..., 0])

    I_inv = 0.0
    edge_R = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        pa, pb = verts[a], verts[b]
        e = pb - pa
        le = np.linalg.norm(e, axis=-1, keepdims=True)
        lhat = e / le
        u = np.cross(lhat, n)
        t0 = np.sum((pa - rho) * u, axis=-1)
        lp = np.sum((pb - rho) * lhat, axis=-1)
        lm = np.sum((pa - rho) * lhat, axis=-1)
        Rp = np.linalg.norm(r - pb, axis=-1)
        Rm = np.linalg.norm(r - pa, axis=-1)
        R0sq = t0 * t0 + d * d
        on_line = np.sqrt(R0sq) <= _TINY * size
        f2 = np.where(on_line, 0.0, _log_ratio(Rp, lp, Rm, lm, R0sq))
        beta = (np.arctan2(t0 * lp, R0sq + ad * Rp) - np.arctan2(t0 * lm, R0sq + ad * Rm))
        I_inv = I_inv + t0 * f2 - ad * beta
        edge_R = edge_R + t0 * 0.5 * (R0sq * f2 + lp * Rp - lm * Rm)
    I_R = (d * d * I_inv + edge_R) / 3.0
    return I_inv, I_R


def tet_potentials(r, verts):
    """Return ``(int 1/R dV', int (r'-r)/R dV')`` over tetrahedra.

    ``r``: ``(..., 3)``; ``verts``: ``(..., 4, 3)`` positively oriented.
    """
    r = np.asarray(r, dtype=float)
    verts = np.asarray(verts, dtype=float)
    S = 0.0
    V = 0.0
    for f in TET_FACES:
        a, b, c = verts[..., f[0], :], verts[..., f[1], :], verts[..., f[2], :]
        I_inv, I_R = triangle_potentials(r, a, b, c)
        nvec = np.cross(b - a, c - a)
        n = nvec / np.linalg.norm(nvec, axis=-1, keepdims=True)
        dist = np.sum((a - r) * n, axis=-1)
        S = S + 0.5 * dist * I_inv
        V = V + n * I_R[..., None]
    return S, V
