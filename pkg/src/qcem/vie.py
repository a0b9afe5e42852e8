"""D-field volume integral equation with SWG basis functions.

Unknowns are SWG coefficients of the flux density ``D``; the bound current
is ``J = j w kappa D`` and the bound charge ``rho = -div(kappa D)``
(including surface charges where ``kappa D . n`` jumps). All quantities use
the engineering convention ``exp(+j w t)``.

Basis restricted to a tetrahedron ``T`` with local face ``k`` (opposite
vertex ``v_k``)::

    f(r) = s * A / (3 V) * (r - v_k),    div f = s * A / V

with ``s = +1`` on the plus tet and ``-1`` on the minus tet. ``f . n = 1``
on the face, pointing out of the plus tet; boundary faces carry half
functions with a plus tet only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import _accel
from .emcore import EPS0, MU0, C0, grad_scalar_green
from .mesh import MeshError, TetMesh, _extract_faces, _face_keys
from .quadrature import (map_points, point_triangle_distance, tet_rule, tet_subdivide, tet_volumes,
                         tri_areas, tri_rule, tri_subdivide)
from .singular import TET_FACES

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
DEFAULT_MEMORY_CAP = 4 * 1024**3
RESIDUAL_TOL = 1e-8


class VIEError(RuntimeError):
    pass


class SingularSystemError(VIEError):
    pass


class ResidualError(VIEError):
    def __init__(self, residual: float, tol: float, backward_error: float | None = None):
        msg = f"relative residual {residual:.3e} exceeds {tol:.1e}"
        if backward_error is not None:
            msg += f" (backward error {backward_error:.3e})"
        super().__init__(msg)
        self.residual = residual
        self.backward_error = backward_error


class ObservationError(VIEError, ValueError):
    pass


@dataclass
class Counters:
    """Process-wide instrumentation (assemblies and factorizations)."""

    assemblies: int = 0
    factorizations: int = 0

    def reset(self):
        self.assemblies = 0
        self.factorizations = 0


counters = Counters()


# ------------------------------------------------------------------ space

@dataclass(frozen=True, eq=False)
class SWGSpace:
    """SWG unknowns on a tetrahedral mesh at one angular frequency."""

    mesh: TetMesh
    omega: float
    face_nodes: np.ndarray      # (F, 3) sorted node triples, F = unknowns
    face_owners: np.ndarray     # (F, 2) plus tet, minus tet (-1 on boundary)
    face_areas: np.ndarray      # (F,)
    tet_unknowns: np.ndarray    # (M, 4) unknown on the face opposite local vertex k
    tet_coef: np.ndarray        # (M, 4) s * A / (3 V)
    volumes: np.ndarray         # (M,)
    permittivity: np.ndarray    # (M,) complex eps_m (F/m)
    kappa: np.ndarray           # (M,) complex contrast

    @property
    def n_unknowns(self) -> int:
        return self.face_nodes.shape[0]

    @property
    def n_boundary(self) -> int:
        return int(np.count_nonzero(self.face_owners[:, 1] < 0))

    @property
    def n_interior(self) -> int:
        return self.n_unknowns - self.n_boundary

    @property
    def k0(self) -> float:
        return self.omega / C0

    def basis_on_tet(self, tet: int, points: np.ndarray) -> np.ndarray:
        """Values ``(4, P, 3)`` of the four local basis functions of ``tet``."""
        verts = self.mesh.nodes[self.mesh.tets[tet]]
        return self.tet_coef[tet][:, None, None] * (points[None] - verts[:, None, :])

    def evaluate_D(self, coeffs: np.ndarray, tet: int, points: np.ndarray) -> np.ndarray:
        vals = self.basis_on_tet(tet, points)
        return np.einsum("k,kpd->pd", coeffs[self.tet_unknowns[tet]], vals)


def build_swg_space(mesh: TetMesh, omega: float) -> SWGSpace:
    """Enumerate SWG unknowns, ordered by sorted face node triple."""
    if omega <= 0:
        raise ValueError("omega must be > 0")
    if mesh.n_tets == 0:
        raise MeshError("mesh has no scatterer tets")
    missing = set(np.unique(mesh.regions).tolist()) - set(mesh.materials)
    if missing:
        raise MeshError(f"regions without material: {sorted(missing)}")
    face_nodes, owners = _extract_faces(mesh.tets, mesh.n_nodes)
    keys = _face_keys(face_nodes, mesh.n_nodes)
    local = _face_keys(mesh.tets[:, TET_FACES], mesh.n_nodes)
    tet_unknowns = np.searchsorted(keys, local)
    verts = mesh.nodes
    areas = tri_areas(verts[face_nodes])
    vols = mesh.volumes()
    sign = np.where(owners[tet_unknowns, 0] == np.arange(mesh.n_tets)[:, None], 1.0, -1.0)
    coef = sign * areas[tet_unknowns] / (3.0 * vols[:, None])
    eps = np.array([mesh.materials[r].permittivity(omega) for r in mesh.regions.tolist()], dtype=complex)
    kappa = (eps - EPS0) / eps
    arrays = (face_nodes, owners, areas, tet_unknowns, coef, vols, eps, kappa)
    for a in arrays:
        a.setflags(write=False)
    return SWGSpace(mesh, float(omega), *arrays)


# --------------------------------------------------------------- assembly

@dataclass(frozen=True)
class AssemblyOptions:
    """Quadrature controls.

    ``far_degree``/``far_tri_degree``: point rules for well-separated element
    pairs. ``near_degree``: outer rule for near pairs, whose inner integral is
    done analytically for ``1/R`` plus ``inner_degree`` for the smooth
    remainder. A pair is near when the element centroids are closer than
    ``near_factor * (r1 + r2)`` (circumradii about the centroid). Near pairs
    that share no vertex use the cheaper ``loose_degree`` outer rule.
    """

    far_degree: int = 2
    far_tri_degree: int = 2
    near_degree: int = 5
    near_tri_degree: int = 5
    loose_degree: int = 2
    inner_degree: int = 2
    near_factor: float = 1.5
    near_subdivide: int = 0
    memory_cap: int = DEFAULT_MEMORY_CAP
    block_bytes: int = 96 * 1024**2


@dataclass(eq=False)
class VIESystem:
    space: SWGSpace
    matrix: np.ndarray | None
    options: AssemblyOptions
    lu: tuple | None = None
    stats: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.space.n_unknowns

    @property
    def omega(self) -> float:
        return self.space.omega

    @property
    def factorized(self) -> bool:
        return self.lu is not None

    def dump(self, path) -> None:
        """Write ``QEMVIE1``, little-endian u64 N, N*N complex128 row-major."""
        if self.matrix is None:
            raise VIEError("matrix was released after factorization")
        with open(path, "wb") as fh:
            fh.write(b"QEMVIE1")
            fh.write(np.uint64(self.n).astype("<u8").tobytes())
            fh.write(np.ascontiguousarray(self.matrix, dtype="<c16").tobytes())


def load_matrix_dump(path) -> np.ndarray:
    raw = open(path, "rb").read()
    if raw[:7] != b"QEMVIE1":
        raise VIEError("not a QEMVIE1 dump")
    n = int(np.frombuffer(raw[7:15], dtype="<u8")[0])
    return np.frombuffer(raw[15:], dtype="<c16").reshape(n, n).copy()


@dataclass(frozen=True)
class _Elements:
    """Tets followed by charged faces, with their far-field quadrature points."""

    n_tets: int
    face_ids: np.ndarray          # unknown index of each charged face
    face_test: np.ndarray         # test charge density per charged face
    face_src: np.ndarray          # source charge density per charged face
    verts: list                   # per element vertex arrays (tets (M,4,3), faces (Fc,3,3))
    centroid: np.ndarray
    radius: np.ndarray
    pstart: np.ndarray
    npts: np.ndarray
    points: np.ndarray            # (P, 3)
    weights: np.ndarray           # (P,)
    owner: np.ndarray             # (P,) element of each point


def _elements(space: SWGSpace, opts: AssemblyOptions) -> _Elements:
    mesh = space.mesh
    tv = mesh.tet_vertices()
    owners = space.face_owners
    boundary = owners[:, 1] < 0
    kp = space.kappa[owners[:, 0]]
    km = np.where(boundary, 0.0, space.kappa[np.maximum(owners[:, 1], 0)])
    jump = ~boundary & (np.abs(kp - km) > 1e-14 * np.maximum(np.abs(kp), 1.0))
    charged = np.flatnonzero(boundary | jump)
    face_test = np.where(boundary[charged], 1.0, 0.0).astype(complex)
    face_src = (kp - km)[charged]
    fv = mesh.nodes[space.face_nodes[charged]]
    # orient consistently with the plus tet's outward normal (for display only)
    b4, w4 = tet_rule(opts.far_degree)
    b3, w3 = tri_rule(opts.far_tri_degree)
    tp = map_points(b4, tv)
    fp = map_points(b3, fv)
    tw = space.volumes[:, None] * w4[None]
    fw = tri_areas(fv)[:, None] * w3[None]
    points = np.concatenate([tp.reshape(-1, 3), fp.reshape(-1, 3)])
    weights = np.concatenate([tw.ravel(), fw.ravel()])
    nt, nf = tv.shape[0], fv.shape[0]
    npts = np.concatenate([np.full(nt, len(w4)), np.full(nf, len(w3))])
    pstart = np.concatenate([[0], np.cumsum(npts)[:-1]])
    owner = np.repeat(np.arange(nt + nf), npts)
    cent = np.concatenate([tv.mean(axis=1), fv.mean(axis=1)])
    rad = np.concatenate([np.linalg.norm(tv - tv.mean(axis=1, keepdims=True), axis=-1).max(axis=1),
                          np.linalg.norm(fv - fv.mean(axis=1, keepdims=True), axis=-1).max(axis=1)])
    return _Elements(nt, charged, face_test, face_src, [tv, fv], cent, rad, pstart, npts,
                     points, weights, owner)


def _near_pairs(el: _Elements, factor: float):
    """Unordered near element pairs ``(i <= j)`` including self pairs."""
    tree = cKDTree(el.centroid)
    rmax = el.radius.max()
    pairs = tree.query_pairs(factor * 2 * rmax, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(el.centroid[pairs[:, 0]] - el.centroid[pairs[:, 1]], axis=1)
        keep = d < factor * (el.radius[pairs[:, 0]] + el.radius[pairs[:, 1]])
        pairs = pairs[keep]
    n = len(el.centroid)
    self_pairs = np.column_stack([np.arange(n), np.arange(n)])
    pairs = np.vstack([self_pairs, np.sort(pairs, axis=1)]) if len(pairs) else self_pairs
    return pairs


def _operators(space: SWGSpace, el: _Elements):
    """Sparse test and source operators ``(P, 4N)``: 3 field parts + charge."""
    N = space.n_unknowns
    tets = space.mesh.tets
    nodes = space.mesh.nodes
    rows, cols, tval, sval = [], [], [], []
    npt = el.npts[0] if el.n_tets else 0
    pts = el.points[: el.n_tets * npt].reshape(el.n_tets, npt, 3)
    wts = el.weights[: el.n_tets * npt].reshape(el.n_tets, npt)
    pidx = np.arange(el.n_tets * npt).reshape(el.n_tets, npt)
    for k in range(4):
        u = space.tet_unknowns[:, k]
        c = space.tet_coef[:, k]
        v = nodes[tets[:, k]]
        fval = c[:, None, None] * (pts - v[:, None, :]) * wts[..., None]  # (M, P, 3)
        for d in range(3):
            rows.append(pidx.ravel())
            cols.append(np.repeat(u, npt) + d * N)
            tval.append(fval[..., d].ravel())
            sval.append((fval[..., d] * space.kappa[:, None]).ravel())
        rho = -3.0 * c[:, None] * wts
        rows.append(pidx.ravel())
        cols.append(np.repeat(u, npt) + 3 * N)
        tval.append(rho.ravel())
        sval.append((rho * space.kappa[:, None]).ravel())
    nf = len(el.face_ids)
    if nf:
        fp = el.pstart[el.n_tets:][:, None] + np.arange(el.npts[-1])[None]
        fw = el.weights[fp]
        rows.append(fp.ravel())
        cols.append(np.repeat(el.face_ids, fp.shape[1]) + 3 * N)
        tval.append((el.face_test[:, None] * fw).ravel())
        sval.append((el.face_src[:, None] * fw).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (len(el.points), 4 * N)
    T = sp.csr_matrix((np.concatenate(tval).astype(complex), (rows, cols)), shape=shape)
    S = sp.csr_matrix((np.concatenate(sval).astype(complex), (rows, cols)), shape=shape)
    return T, S


def _outer_rule_tet(verts, degree, subdivide):
    b, w = tet_rule(degree)
    if subdivide:
        kids = tet_subdivide(verts, subdivide)            # (K, C, 4, 3)
        pts = map_points(b, kids).reshape(verts.shape[0], -1, 3)
        vol = tet_volumes(kids)                             # (K, C)
        wts = (vol[..., None] * w).reshape(verts.shape[0], -1)
    else:
        pts = map_points(b, verts)
        wts = tet_volumes(verts)[:, None] * w
    return pts, wts


def _outer_rule_tri(verts, degree, subdivide):
    b, w = tri_rule(degree)
    if subdivide:
        kids = tri_subdivide(verts, subdivide)
        pts = map_points(b, kids).reshape(verts.shape[0], -1, 3)
        wts = (tri_areas(kids)[..., None] * w).reshape(verts.shape[0], -1)
    else:
        pts = map_points(b, verts)
        wts = tri_areas(verts)[:, None] * w
    return pts, wts


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _bary_rule(kind: str, degree: int, levels: int):
    """Barycentric rule on the reference simplex, optionally on subdivided children."""
    if kind == "tet":
        ref = np.vstack([np.zeros(3), np.eye(3)])
        b, w = tet_rule(degree)
        kids = tet_subdivide(ref[None], levels)[0] if levels else ref[None]
        meas = tet_volumes(kids)
    else:
        ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ref3 = np.column_stack([ref, np.zeros(3)])
        b, w = tri_rule(degree)
        kids = tri_subdivide(ref3[None], levels)[0] if levels else ref3[None]
        meas = tri_areas(kids)
    pts = map_points(b, kids).reshape(-1, 3)
    wts = (meas[:, None] / meas.sum() * w[None]).ravel()
    dim = 3 if kind == "tet" else 2
    lam = pts[:, :dim]
    return np.ascontiguousarray(np.column_stack([1.0 - lam.sum(axis=1), lam])), np.ascontiguousarray(wts)


def _scatter_add(Z, rows, cols, vals):
    """``Z[rows, cols] += vals`` with duplicates summed (faster than ``np.add.at``)."""
    acc = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=Z.shape).tocsr()
    acc.sum_duplicates()
    r = np.repeat(np.arange(Z.shape[0]), np.diff(acc.indptr))
    Z[r, acc.indices] += acc.data


def _touching(nodes_a, nodes_b):
    """True where the two node lists share at least one node."""
    return (nodes_a[:, :, None] == nodes_b[:, None, :]).any(axis=(1, 2))


def _near_tet_tet(space, el, pairs, opts, Z):
    touch = _touching(space.mesh.tets[pairs[:, 0]], space.mesh.tets[pairs[:, 1]])
    for mask, degree in ((touch, opts.near_degree), (~touch, opts.loose_degree)):
        if mask.any():
            _near_tet_tet_rule(space, el, pairs[mask], degree, opts, Z)


def _near_tet_tet_rule(space, el, pairs, degree, opts, Z):
    k0 = space.k0
    tets = space.mesh.tets
    nodes = space.mesh.nodes
    tv = el.verts[0]
    w2mu = space.omega**2 * MU0
    xb, xw = _bary_rule("tet", degree, opts.near_subdivide)
    yb, yw = _bary_rule("tet", opts.inner_degree, 0)
    for sl in _chunks(len(pairs), 32768):
        Si, Ti = pairs[sl, 0], pairs[sl, 1]
        J0, J1, J2, J3 = _accel.tet_tet_moments(np.ascontiguousarray(tv[Si]), np.ascontiguousarray(tv[Ti]),
                                                xb, xw, yb, yw, k0)
        same = Si == Ti
        avg = 0.5 * (J1[same] + J2[same])
        J1[same] = avg
        J2[same] = avg
        va = nodes[tets[Si]]          # (K, 4, 3) free vertices of S
        vb = nodes[tets[Ti]]
        ca, cb = space.tet_coef[Si], space.tet_coef[Ti]
        ua, ub = space.tet_unknowns[Si], space.tet_unknowns[Ti]
        core = (J3[:, None, None]
                - np.einsum("kbd,kd->kb", vb, J1)[:, None, :]
                - np.einsum("kad,kd->ka", va, J2)[:, :, None]
                + np.einsum("kad,kbd->kab", va, vb) * J0[:, None, None])
        base = ca[:, :, None] * cb[:, None, :] * (-w2mu * core + 9.0 / EPS0 * J0[:, None, None])
        fwd = base * space.kappa[Ti][:, None, None]
        off = ~same
        bwd = np.swapaxes(base[off], 1, 2) * space.kappa[Si[off]][:, None, None]
        rows = np.concatenate([np.broadcast_to(ua[:, :, None], fwd.shape).ravel(),
                               np.broadcast_to(ub[off][:, :, None], bwd.shape).ravel()])
        cols = np.concatenate([np.broadcast_to(ub[:, None, :], fwd.shape).ravel(),
                               np.broadcast_to(ua[off][:, None, :], bwd.shape).ravel()])
        _scatter_add(Z, rows, cols, np.concatenate([fwd.ravel(), bwd.ravel()]))


def _near_face_tet(space, el, pairs, opts, Z):
    """Charge coupling between charged faces and tets (``pairs[:, 0]`` faces)."""
    touch = _touching(space.face_nodes[el.face_ids[pairs[:, 0]]], space.mesh.tets[pairs[:, 1]])
    k0 = space.k0
    tv, fv = el.verts
    yb, yw = _bary_rule("tet", opts.inner_degree, 0)
    J0 = np.empty(len(pairs), dtype=complex)
    for mask, degree in ((touch, opts.near_tri_degree), (~touch, opts.loose_degree)):
        fb, fw = _bary_rule("tri", degree, opts.near_subdivide)
        fi, ti = pairs[mask, 0], pairs[mask, 1]
        J0[mask] = _accel.face_tet_J0(np.ascontiguousarray(fv[fi]), np.ascontiguousarray(tv[ti]),
                                      fb, fw, yb, yw, k0)
    fi, ti = pairs[:, 0], pairs[:, 1]
    uf = el.face_ids[fi]
    ut = space.tet_unknowns[ti]
    rho = -3.0 * space.tet_coef[ti]                                  # (K, 4)
    # test on tet with source on face, then test on face with source on tet
    v1 = rho * el.face_src[fi][:, None] * J0[:, None] / EPS0
    v2 = el.face_test[fi][:, None] * rho * space.kappa[ti][:, None] * J0[:, None] / EPS0
    uf4 = np.repeat(uf, 4)
    _scatter_add(Z, np.concatenate([ut.ravel(), uf4]), np.concatenate([uf4, ut.ravel()]),
                 np.concatenate([v1.ravel(), v2.ravel()]))


def _near_face_face(space, el, pairs, opts, Z):
    fn = space.face_nodes[el.face_ids]
    touch = _touching(fn[pairs[:, 0]], fn[pairs[:, 1]])
    k0 = space.k0
    fv = el.verts[1]
    yb, yw = _bary_rule("tri", opts.inner_degree, 0)
    J0 = np.empty(len(pairs), dtype=complex)
    for mask, degree in ((touch, opts.near_tri_degree), (~touch, opts.loose_degree)):
        fb, fw = _bary_rule("tri", degree, opts.near_subdivide)
        a, b = pairs[mask, 0], pairs[mask, 1]
        J0[mask] = _accel.face_face_J0(np.ascontiguousarray(fv[a]), np.ascontiguousarray(fv[b]),
                                       fb, fw, yb, yw, k0)
    a, b = pairs[:, 0], pairs[:, 1]
    # one J0 per unordered pair keeps the matrix symmetric
    ua, ub = el.face_ids[a], el.face_ids[b]
    off = a != b
    _scatter_add(Z, np.concatenate([ua, ub[off]]), np.concatenate([ub, ua[off]]),
                 np.concatenate([el.face_test[a] * el.face_src[b] * J0,
                                 (el.face_test[b] * el.face_src[a] * J0)[off]]) / EPS0)


def _gram(space: SWGSpace, Z: np.ndarray):
    b, w = tet_rule(2)
    tv = space.mesh.tet_vertices()
    x = map_points(b, tv)                                  # (M, 4, 3)
    rel = x[:, None, :, :] - tv[:, :, None, :]             # (M, a, p, 3)
    G = np.einsum("p,mapd,mbpd->mab", w, rel, rel) * space.volumes[:, None, None]
    c = space.tet_coef
    vals = c[:, :, None] * c[:, None, :] * G / space.permittivity[:, None, None]
    u = space.tet_unknowns
    rows = np.broadcast_to(u[:, :, None], vals.shape)
    cols = np.broadcast_to(u[:, None, :], vals.shape)
    _scatter_add(Z, rows, cols, vals)


def gram_matrix(space: SWGSpace) -> np.ndarray:
    """``int f_m . f_n / eps`` over the mesh."""
    Z = np.zeros((space.n_unknowns,) * 2, dtype=complex)
    _gram(space, Z)
    return Z


def assemble(space: SWGSpace, options: AssemblyOptions | None = None) -> VIESystem:
    """Dense Galerkin matrix of the D-field equation.

    ``Z_mn = <f_m, f_n / eps> - w^2 mu0 <f_m, kappa f_n g>
    + (1/eps0) <rho_m^test, g rho_n^src>`` where the test charges are
    ``-div f_m`` plus ``f_m . n`` on the body surface and the source
    charges are those of ``kappa f_n``.
    """
    opts = options or AssemblyOptions()
    N = space.n_unknowns
    need = 16 * N * N
    if need > opts.memory_cap:
        raise MemoryError(f"dense matrix needs {need / 1024**3:.2f} GiB, cap is "
                          f"{opts.memory_cap / 1024**3:.2f} GiB")
    counters.assemblies += 1
    Z = np.zeros((N, N), dtype=complex)
    _gram(space, Z)
    if not np.any(space.kappa != 0):
        return VIESystem(space, Z, opts, stats={"nearPairs": 0})

    el = _elements(space, opts)
    T, S = _operators(space, el)
    ST = S.T.tocsr()
    pairs = _near_pairs(el, opts.near_factor)
    ne = len(el.centroid)
    both = np.vstack([pairs, pairs[:, ::-1]])
    near = sp.csr_matrix((np.ones(len(both), dtype=bool), (both[:, 0], both[:, 1])), shape=(ne, ne))

    k0 = space.k0
    w2mu = space.omega**2 * MU0
    P = len(el.points)
    rows_per_block = max(16, int(opts.block_bytes // (16 * max(P, 1))))
    elem_order = np.arange(ne)
    start = 0
    while start < ne:
        # grow the element block until it holds about rows_per_block points
        stop = start
        cnt = 0
        while stop < ne and cnt < rows_per_block:
            cnt += el.npts[stop]
            stop += 1
        blk = elem_order[start:stop]
        R = np.arange(el.pstart[start], el.pstart[start] + cnt)
        G = _accel.point_kernel(el.points[R], el.points, k0)
        # mask near element pairs (they are integrated accurately below)
        sub = near[blk]
        er, ec = sub.nonzero()
        if len(er):
            lr = el.pstart[blk[er]] - el.pstart[start]
            nr, nc = el.npts[blk[er]], el.npts[ec]
            rr = np.repeat(lr, nr * nc) + _ragged_inner(nr, nc)[0]
            cc = np.repeat(el.pstart[ec], nr * nc) + _ragged_inner(nr, nc)[1]
            G[rr, cc] = 0.0
        W = np.asarray((ST @ G.T).T)                      # (|R|, 4N)
        TR = T[R].tocsr()
        used = np.unique(TR.indices % N)
        acc = np.zeros((len(used), N), dtype=complex)
        for d in range(4):
            Td = TR[:, d * N:(d + 1) * N][:, used].T.tocsr()
            scale = -w2mu if d < 3 else 1.0 / EPS0
            acc += scale * (Td @ W[:, d * N:(d + 1) * N])
        Z[used] += acc
        start = stop

    nt = el.n_tets
    is_t0, is_t1 = pairs[:, 0] < nt, pairs[:, 1] < nt
    tt = pairs[is_t0 & is_t1]
    _near_tet_tet(space, el, tt, opts, Z)
    ft = pairs[is_t0 ^ is_t1]
    if len(ft):
        face = np.where(ft[:, 0] >= nt, ft[:, 0], ft[:, 1]) - nt
        tet = np.where(ft[:, 0] < nt, ft[:, 0], ft[:, 1])
        _near_face_tet(space, el, np.column_stack([face, tet]), opts, Z)
    ff = pairs[~is_t0 & ~is_t1] - nt
    if len(ff):
        _near_face_face(space, el, ff, opts, Z)
    return VIESystem(space, Z, opts, stats={"nearPairs": int(len(pairs)), "points": int(P)})


def _ragged_inner(nr, nc):
    """Local (row, col) offsets enumerating ``nr[i] x nc[i]`` blocks."""
    sizes = nr * nc
    tot = int(sizes.sum())
    starts = np.repeat(np.cumsum(sizes) - sizes, sizes)
    k = np.arange(tot) - starts
    ncr = np.repeat(nc, sizes)
    return k // ncr, k % ncr


# ------------------------------------------------------------------ solve

def factorize(system: VIESystem, keep_matrix: bool | None = None) -> VIESystem:
    """LU-factorize in place; the matrix copy is kept for residual checks
    when memory allows."""
    if system.matrix is None:
        raise VIEError("system has no matrix to factorize")
    A = system.matrix
    if keep_matrix is None:
        keep_matrix = 2 * A.nbytes <= system.options.memory_cap
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, overwrite_a=not keep_matrix, check_finite=True)
    counters.factorizations += 1
    d = np.abs(np.diag(lu))
    if not np.all(np.isfinite(d)) or d.max() == 0 or d.min() < 1e-14 * d.max():
        raise SingularSystemError(f"pivot {d.min():.3e} below 1e-14 x max pivot {d.max():.3e}")
    system.lu = (lu, piv)
    if not keep_matrix:
        system.matrix = None
        log.warning("matrix released after factorization; residual checks disabled")
    return system


@dataclass(frozen=True, eq=False)
class VIESolution:
    space: SWGSpace
    coeffs: np.ndarray
    residual: float | None = None
    backward_error: float | None = None

    def D(self, tet: int, points) -> np.ndarray:
        return self.space.evaluate_D(self.coeffs, tet, np.asarray(points, float))

    def J(self, tet: int, points) -> np.ndarray:
        """Bound current ``j w kappa D`` in tet ``tet``."""
        return 1j * self.space.omega * self.space.kappa[tet] * self.D(tet, points)

    def volume_charge(self) -> np.ndarray:
        """Per-tet bound charge density ``-kappa div D`` (uniform per tet)."""
        s = self.space
        div = np.einsum("mk,mk->m", 3.0 * s.tet_coef, self.coeffs[s.tet_unknowns])
        return -s.kappa * div

    def surface_charge(self) -> np.ndarray:
        """Per-face surface charge ``sum kappa D . n_out`` (all unknown faces)."""
        s = self.space
        own = s.face_owners
        kp = s.kappa[own[:, 0]]
        km = np.where(own[:, 1] < 0, 0.0, s.kappa[np.maximum(own[:, 1], 0)])
        return (kp - km) * self.coeffs


def solve(system: VIESystem, rhs, check: bool = True, tol: float = RESIDUAL_TOL,
          refine_steps: int = 2) -> VIESolution:
    """Solve with the stored factorization; ``rhs`` may be ``(N,)`` or ``(N, k)``.

    The relative residual ``||A x - b|| / ||b||`` is checked (and reduced
    by iterative refinement) when the matrix was kept. Conductors at low
    frequency give ``cond(A)`` of 1e9 or more, which puts the attainable
    relative residual of a double-precision solution near
    ``eps ||A|| ||x|| / ||b||``. If the relative residual misses ``tol`` but
    the normwise backward error ``||r|| / (||A|| ||x|| + ||b||)`` (inf-norms)
    is below ``tol``, the solve is accepted with a warning; otherwise
    :class:`ResidualError` is raised.
    """
    if not system.factorized:
        raise VIEError("system is not factorized")
    b = np.asarray(rhs, dtype=complex)
    if b.ndim == 2:
        # column by column so a block solve matches independent solves exactly
        return [solve(system, b[:, i], check, tol, refine_steps) for i in range(b.shape[1])]
    x = sla.lu_solve(system.lu, b)
    res = back = None
    if system.matrix is not None and check:
        A = system.matrix
        if "normInf" not in system.stats:
            system.stats["normInf"] = float(np.abs(A).sum(axis=1).max())
        bn = float(np.linalg.norm(b)) or 1.0
        for step in range(refine_steps + 1):
            r = b - A @ x
            res = float(np.linalg.norm(r) / bn)
            if res < tol or step == refine_steps:
                break
            x = x + sla.lu_solve(system.lu, r)
        back = float(np.abs(r).max() / (system.stats["normInf"] * np.abs(x).max()
                                        + np.abs(b).max() + 1e-300))
        if res >= tol:
            if back >= tol:
                raise ResidualError(res, tol, back)
            log.warning("relative residual %.3e exceeds %.1e; accepted on backward error %.3e",
                        res, tol, back)
    return VIESolution(system.space, x, res, back)


# ------------------------------------------------- sources and observation

def _inside_tets(space: SWGSpace, r: np.ndarray) -> np.ndarray:
    tv = space.mesh.tet_vertices()
    lo, hi = tv.min(axis=1), tv.max(axis=1)
    pad = 1e-12 * np.max(hi - lo, axis=1, keepdims=True)
    cand = np.flatnonzero(np.all((r >= lo - pad) & (r <= hi + pad), axis=1))
    if not len(cand):
        return cand
    T = tv[cand]
    M = np.stack([T[:, 1] - T[:, 0], T[:, 2] - T[:, 0], T[:, 3] - T[:, 0]], axis=-1)
    lam = np.linalg.solve(M, (r - T[:, 0])[..., None])[..., 0]
    # points on shared faces, edges and nodes count as inside
    inside = np.all(lam >= -1e-12, axis=1) & (lam.sum(axis=1) <= 1 + 1e-12)
    return cand[inside]


def local_size(space: SWGSpace) -> np.ndarray:
    """Longest edge per tet."""
    tv = space.mesh.tet_vertices()
    e = [tv[:, i] - tv[:, j] for i, j in ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))]
    return np.max(np.linalg.norm(np.stack(e, 1), axis=-1), axis=1)


def check_observation(space: SWGSpace, r, exclusion: float = 0.1) -> None:
    """Raise if ``r`` lies inside a tet or within ``exclusion * h`` of the body."""
    r = np.asarray(r, dtype=float)
    if len(_inside_tets(space, r)):
        raise ObservationError(f"point {r.tolist()} lies inside the scatterer")
    bf = space.face_owners[:, 1] < 0
    tri = space.mesh.nodes[space.face_nodes[bf]]
    dist = point_triangle_distance(r[None], tri)
    k = int(np.argmin(dist))
    h = local_size(space)[space.face_owners[bf][k, 0]]
    if dist[k] < exclusion * h:
        raise ObservationError(f"point {r.tolist()} is {dist[k]:.3e} m from the scatterer, "
                               f"closer than {exclusion} x local h ({h:.3e} m)")


def _tet_groups(space: SWGSpace, r: np.ndarray):
    """Distance-adaptive volume rules for integrands singular at ``r``.

    Yields ``(tets, points (K,P,3), weights (K,P))`` groups. Rules depend on
    ``r`` only, so source and observation functionals at the same point use
    identical quadrature.
    """
    tv = space.mesh.tet_vertices()
    cent = tv.mean(axis=1)
    diam = local_size(space)
    dist = np.linalg.norm(cent - r, axis=1)
    ratio = dist / diam
    level = np.select([ratio >= 4, ratio >= 2, ratio >= 1], [0, 1, 2], 3)
    for L in range(4):
        idx = np.flatnonzero(level == L)
        if len(idx):
            pts, wts = _outer_rule_tet(tv[idx], 5, L)
            yield idx, pts, wts


def _face_groups(space: SWGSpace, r: np.ndarray, faces: np.ndarray):
    tri = space.mesh.nodes[space.face_nodes[faces]]
    cent = tri.mean(axis=1)
    diam = np.max(np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=-1), axis=1)
    ratio = np.linalg.norm(cent - r, axis=1) / diam
    level = np.select([ratio >= 4, ratio >= 2, ratio >= 1], [0, 1, 2], 3)
    for L in range(4):
        idx = np.flatnonzero(level == L)
        if len(idx):
            pts, wts = _outer_rule_tri(tri[idx], 5, L)
            yield faces[idx], pts, wts


def assemble_rhs(space: SWGSpace, field, center=None, degree: int = 5) -> np.ndarray:
    """Tested incident field ``v_m = int f_m . E`` for a callable ``E(points)``.

    With ``center`` (a source location) rules refine toward that point;
    otherwise a fixed rule of ``degree`` is used on every tet.
    """
    N = space.n_unknowns
    v = np.zeros(N, dtype=complex)
    nodes, tets = space.mesh.nodes, space.mesh.tets
    if center is not None:
        groups = _tet_groups(space, np.asarray(center, float))
    else:
        groups = [(np.arange(space.mesh.n_tets),) + _outer_rule_tet(space.mesh.tet_vertices(), degree, 0)]
    for idx, pts, wts in groups:
        E = np.asarray(field(pts), dtype=complex)
        E = np.broadcast_to(E, pts.shape)
        for k in range(4):
            vk = nodes[tets[idx, k]]
            proj = np.einsum("kpd,kpd->kp", pts - vk[:, None, :], E)
            val = space.tet_coef[idx, k] * np.einsum("kp,kp->k", wts, proj)
            v += np.bincount(space.tet_unknowns[idx, k], weights=val.real, minlength=N)
            v += 1j * np.bincount(space.tet_unknowns[idx, k], weights=val.imag, minlength=N)
    return v


def dipole_rhs(space: SWGSpace, r_src, m) -> np.ndarray:
    """RHS for a point magnetic dipole ``m`` at ``r_src`` (outside the mesh)."""
    from .emcore import incident_E_magnetic_dipole

    r_src = np.asarray(r_src, dtype=float)
    hit = _inside_tets(space, r_src)
    if len(hit):
        raise ObservationError(f"dipole at {r_src.tolist()} lies inside scatterer tet {int(hit[0])}")
    omega = space.omega
    return assemble_rhs(space, lambda p: incident_E_magnetic_dipole(p, r_src, m, omega), center=r_src)


def _current_at(sol: VIESolution, idx, pts):
    s = sol.space
    nodes, tets = s.mesh.nodes, s.mesh.tets
    D = np.zeros(pts.shape, dtype=complex)
    for k in range(4):
        vk = nodes[tets[idx, k]]
        coef = s.tet_coef[idx, k] * sol.coeffs[s.tet_unknowns[idx, k]]
        D += coef[:, None, None] * (pts - vk[:, None, :])
    return 1j * s.omega * s.kappa[idx][:, None, None] * D


def scattered_H(sol: VIESolution, r_obs, check: bool = True) -> np.ndarray:
    """``H^s(r) = int grad g(r, r') x J(r') dr'`` (A/m)."""
    s = sol.space
    r = np.asarray(r_obs, dtype=float)
    if check:
        check_observation(s, r)
    H = np.zeros(3, dtype=complex)
    for idx, pts, wts in _tet_groups(s, r):
        J = _current_at(sol, idx, pts)
        grad = grad_scalar_green(r, pts, s.k0)
        H += np.einsum("kp,kpd->d", wts, np.cross(grad, J))
    return H


def scattered_E(sol: VIESolution, r_obs, check: bool = True) -> np.ndarray:
    """``E^s = -j w mu0 int J g - (1/eps0) int rho grad g`` incl. surface charges."""
    from .emcore import scalar_green

    s = sol.space
    r = np.asarray(r_obs, dtype=float)
    if check:
        check_observation(s, r)
    E = np.zeros(3, dtype=complex)
    rho = sol.volume_charge()
    for idx, pts, wts in _tet_groups(s, r):
        J = _current_at(sol, idx, pts)
        g = scalar_green(r, pts, s.k0)
        grad = grad_scalar_green(r, pts, s.k0)
        E += -1j * s.omega * MU0 * np.einsum("kp,kp,kpd->d", wts, g, J)
        E += -np.einsum("k,kp,kpd->d", rho[idx], wts, grad) / EPS0
    sigma = sol.surface_charge()
    faces = np.flatnonzero(sigma != 0)
    if len(faces):
        for fidx, pts, wts in _face_groups(s, r, faces):
            grad = grad_scalar_green(r, pts, s.k0)
            E += -np.einsum("k,kp,kpd->d", sigma[fidx], wts, grad) / EPS0
    return E
