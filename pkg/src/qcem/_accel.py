"""Compiled near-pair integrals for VIE assembly.

Scalar ports of :mod:`qcem.singular` driven by explicit loops; the numpy
versions remain the reference implementation and are used in tests to
check these kernels.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_TINY = 1e-13
_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)
_INV4PI = 1.0 / (4.0 * math.pi)


@njit(cache=True)
def _log_ratio(Rp, lp, Rm, lm, R0sq):
    if lp >= 0:
        num = Rp + lp
    else:
        num = R0sq / max(Rp - lp, _TINY)
    if lm >= 0:
        den = Rm + lm
    else:
        den = R0sq / max(Rm - lm, _TINY)
    if num <= 0 or den <= 0:
        return 0.0
    out = math.log(num / den)
    return out if math.isfinite(out) else 0.0


@njit(cache=True)
def _tri_pot(rx, ry, rz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Scalar core: returns ``(int 1/R, int R, d, nx, ny, nz)``."""
    e1x, e1y, e1z = bx - ax, by - ay, bz - az
    e2x, e2y, e2z = cx - ax, cy - ay, cz - az
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    scale = math.sqrt(nx * nx + ny * ny + nz * nz)
    nx /= scale
    ny /= scale
    nz /= scale
    size = math.sqrt(scale)
    d = (rx - ax) * nx + (ry - ay) * ny + (rz - az) * nz
    ad = abs(d)
    px, py, pz = rx - d * nx, ry - d * ny, rz - d * nz
    I_inv = 0.0
    edge_R = 0.0
    for e in range(3):
        if e == 0:
            sx, sy, sz, tx, ty, tz = ax, ay, az, bx, by, bz
        elif e == 1:
            sx, sy, sz, tx, ty, tz = bx, by, bz, cx, cy, cz
        else:
            sx, sy, sz, tx, ty, tz = cx, cy, cz, ax, ay, az
        lx, ly, lz = tx - sx, ty - sy, tz - sz
        le = math.sqrt(lx * lx + ly * ly + lz * lz)
        lx /= le
        ly /= le
        lz /= le
        ux = ly * nz - lz * ny
        uy = lz * nx - lx * nz
        uz = lx * ny - ly * nx
        t0 = (sx - px) * ux + (sy - py) * uy + (sz - pz) * uz
        lp = (tx - px) * lx + (ty - py) * ly + (tz - pz) * lz
        lm = (sx - px) * lx + (sy - py) * ly + (sz - pz) * lz
        Rp = math.sqrt((rx - tx) ** 2 + (ry - ty) ** 2 + (rz - tz) ** 2)
        Rm = math.sqrt((rx - sx) ** 2 + (ry - sy) ** 2 + (rz - sz) ** 2)
        R0sq = t0 * t0 + d * d
        if math.sqrt(R0sq) <= _TINY * size:
            f2 = 0.0
        else:
            f2 = _log_ratio(Rp, lp, Rm, lm, R0sq)
        beta = math.atan2(t0 * lp, R0sq + ad * Rp) - math.atan2(t0 * lm, R0sq + ad * Rm)
        I_inv += t0 * f2 - ad * beta
        edge_R += t0 * 0.5 * (R0sq * f2 + lp * Rp - lm * Rm)
    I_R = (d * d * I_inv + edge_R) / 3.0
    return I_inv, I_R, d, nx, ny, nz


@njit(cache=True)
def tri_pot(r, v):
    """``(int 1/R, int R)`` over triangle ``v (3,3)`` at point ``r``."""
    I_inv, I_R, _, _, _, _ = _tri_pot(r[0], r[1], r[2], v[0, 0], v[0, 1], v[0, 2],
                                      v[1, 0], v[1, 1], v[1, 2], v[2, 0], v[2, 1], v[2, 2])
    return I_inv, I_R


@njit(cache=True)
def _tet_pot(rx, ry, rz, tv):
    S = 0.0
    Vx = 0.0
    Vy = 0.0
    Vz = 0.0
    for f in range(4):
        i, j, k = _FACES[f, 0], _FACES[f, 1], _FACES[f, 2]
        I_inv, I_R, d, nx, ny, nz = _tri_pot(rx, ry, rz, tv[i, 0], tv[i, 1], tv[i, 2],
                                             tv[j, 0], tv[j, 1], tv[j, 2], tv[k, 0], tv[k, 1], tv[k, 2])
        # distance from r to the face along the outward normal is -d
        S -= 0.5 * d * I_inv
        Vx += nx * I_R
        Vy += ny * I_R
        Vz += nz * I_R
    return S, Vx, Vy, Vz


@njit(cache=True)
def tet_pot(r, tv):
    """``(int 1/R dV, int (r' - r)/R dV)`` over tet ``tv (4,3)``."""
    S, Vx, Vy, Vz = _tet_pot(r[0], r[1], r[2], tv)
    V = np.empty(3)
    V[0], V[1], V[2] = Vx, Vy, Vz
    return S, V


@njit(cache=True)
def _remainder(R, k0):
    if R > 0:
        return (complex(math.cos(k0 * R) - 1.0, -math.sin(k0 * R))) / R * _INV4PI
    return complex(0.0, -k0) * _INV4PI


@njit(cache=True)
def _map(bary, verts):
    out = np.zeros((bary.shape[0], 3))
    for p in range(bary.shape[0]):
        for k in range(bary.shape[1]):
            out[p] += bary[p, k] * verts[k]
    return out


@njit(cache=True)
def _tet_vol(tv):
    a = tv[1] - tv[0]
    b = tv[2] - tv[0]
    c = tv[3] - tv[0]
    return (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0])) / 6.0


@njit(cache=True)
def _tri_area(fv):
    a = fv[1] - fv[0]
    b = fv[2] - fv[0]
    cx = a[1] * b[2] - a[2] * b[1]
    cy = a[2] * b[0] - a[0] * b[2]
    cz = a[0] * b[1] - a[1] * b[0]
    return 0.5 * math.sqrt(cx * cx + cy * cy + cz * cz)


@njit(cache=True)
def tet_tet_moments(X, Y, xb, xw, yb, yw, k0):
    """Moments ``J0 = int int g``, ``J1 = int int r g``, ``J2 = int int r' g``,
    ``J3 = int int r . r' g`` for tet pairs ``X[k] x Y[k]``.

    Outer rule ``(xb, xw)`` over ``X`` (may be a concatenation of child
    rules with weights summing to 1); the inner ``1/R`` part is analytic and
    the smooth remainder uses ``(yb, yw)``.
    """
    K = X.shape[0]
    J0 = np.zeros(K, dtype=np.complex128)
    J1 = np.zeros((K, 3), dtype=np.complex128)
    J2 = np.zeros((K, 3), dtype=np.complex128)
    J3 = np.zeros(K, dtype=np.complex128)
    for k in range(K):
        vx = _tet_vol(X[k])
        vy = _tet_vol(Y[k])
        xs = _map(xb, X[k])
        ys = _map(yb, Y[k])
        for p in range(xs.shape[0]):
            x = xs[p]
            S, Vx, Vy, Vz = _tet_pot(x[0], x[1], x[2], Y[k])
            i0 = complex(S * _INV4PI, 0.0)
            i1x = complex((x[0] * S + Vx) * _INV4PI, 0.0)
            i1y = complex((x[1] * S + Vy) * _INV4PI, 0.0)
            i1z = complex((x[2] * S + Vz) * _INV4PI, 0.0)
            for q in range(ys.shape[0]):
                y = ys[q]
                R = math.sqrt((x[0] - y[0]) ** 2 + (x[1] - y[1]) ** 2 + (x[2] - y[2]) ** 2)
                rem = _remainder(R, k0) * (yw[q] * vy)
                i0 += rem
                i1x += rem * y[0]
                i1y += rem * y[1]
                i1z += rem * y[2]
            w = xw[p] * vx
            J0[k] += w * i0
            J1[k, 0] += w * i0 * x[0]
            J1[k, 1] += w * i0 * x[1]
            J1[k, 2] += w * i0 * x[2]
            J2[k, 0] += w * i1x
            J2[k, 1] += w * i1y
            J2[k, 2] += w * i1z
            J3[k] += w * (x[0] * i1x + x[1] * i1y + x[2] * i1z)
    return J0, J1, J2, J3


@njit(cache=True)
def face_tet_J0(F, T, fb, fw, yb, yw, k0):
    """``int_F int_T g`` with the outer rule on faces ``F`` and analytic tets."""
    K = F.shape[0]
    out = np.zeros(K, dtype=np.complex128)
    for k in range(K):
        area = _tri_area(F[k])
        vy = _tet_vol(T[k])
        xs = _map(fb, F[k])
        ys = _map(yb, T[k])
        for p in range(xs.shape[0]):
            x = xs[p]
            S, _, _, _ = _tet_pot(x[0], x[1], x[2], T[k])
            acc = complex(S * _INV4PI, 0.0)
            for q in range(ys.shape[0]):
                y = ys[q]
                R = math.sqrt((x[0] - y[0]) ** 2 + (x[1] - y[1]) ** 2 + (x[2] - y[2]) ** 2)
                acc += _remainder(R, k0) * (yw[q] * vy)
            out[k] += fw[p] * area * acc
    return out


@njit(cache=True)
def face_face_J0(A, B, fb, fw, yb, yw, k0):
    """``int_A int_B g`` over triangle pairs, analytic inner ``1/R``."""
    K = A.shape[0]
    out = np.zeros(K, dtype=np.complex128)
    for k in range(K):
        area = _tri_area(A[k])
        ab = _tri_area(B[k])
        xs = _map(fb, A[k])
        ys = _map(yb, B[k])
        for p in range(xs.shape[0]):
            x = xs[p]
            I_inv, _ = tri_pot(x, B[k])
            acc = complex(I_inv * _INV4PI, 0.0)
            for q in range(ys.shape[0]):
                y = ys[q]
                R = math.sqrt((x[0] - y[0]) ** 2 + (x[1] - y[1]) ** 2 + (x[2] - y[2]) ** 2)
                acc += _remainder(R, k0) * (yw[q] * ab)
            out[k] += fw[p] * area * acc
    return out


@njit(cache=True)
def point_kernel(x, y, k0):
    """Dense ``exp(-j k0 R) / (4 pi R)`` between point sets (zero at ``R = 0``)."""
    G = np.empty((x.shape[0], y.shape[0]), dtype=np.complex128)
    for i in range(x.shape[0]):
        for j in range(y.shape[0]):
            R = math.sqrt((x[i, 0] - y[j, 0]) ** 2 + (x[i, 1] - y[j, 1]) ** 2 + (x[i, 2] - y[j, 2]) ** 2)
            if R > 0:
                G[i, j] = complex(math.cos(k0 * R), -math.sin(k0 * R)) * (_INV4PI / R)
            else:
                G[i, j] = 0.0
    return G
