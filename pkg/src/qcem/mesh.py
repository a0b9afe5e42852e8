"""Conformal tetrahedral meshes of lossy bodies.

Structured generators split hexahedral cells into six Kuhn tetrahedra that
all share the cell's main diagonal; the pattern is translation invariant,
so neighbouring cells meet on matching face diagonals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .emcore import EPS0, Convention
from .quadrature import tet_volumes
from .singular import TET_FACES

log = logging.getLogger(__name__)

DEFAULT_MAX_TETS = 60_000
DUPLICATE_TOL = 1e-12


class MeshError(ValueError):
    """Raised on parse errors and mesh invariant violations."""


@dataclass(frozen=True)
class Material:
    name: str
    conductivity: float = 0.0
    relative_permittivity: float = 1.0

    def __post_init__(self):
        if self.conductivity < 0:
            raise ValueError(f"material {self.name!r}: conductivity must be >= 0")
        if self.relative_permittivity < 1:
            raise ValueError(f"material {self.name!r}: relative permittivity must be >= 1")

    def permittivity(self, omega: float, convention=Convention.ENGINEERING) -> complex:
        """Complex permittivity ``eps0 eps_r + sigma / (j w)`` (F/m)."""
        eps = EPS0 * self.relative_permittivity - 1j * self.conductivity / omega
        return eps if Convention(convention) is Convention.ENGINEERING else np.conj(eps)

    def contrast(self, omega: float) -> complex:
        """``kappa = (eps_m - eps0) / eps_m`` under the engineering convention."""
        eps = self.permittivity(omega)
        return (eps - EPS0) / eps


VACUUM = Material("vacuum", 0.0, 1.0)
ALUMINUM = Material("aluminum", 1.6e8, 1.0)
SILVER = Material("silver", 5e7, 1.0)


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Tetrahedral mesh with per-tet region ids and region materials.

    ``nodes`` is ``(n, 3)`` in metres, ``tets`` is ``(m, 4)`` node indices
    ordered for positive signed volume, ``regions`` is ``(m,)``.
    """

    nodes: np.ndarray
    tets: np.ndarray
    regions: np.ndarray
    materials: Mapping[int, Material] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 3)
        tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        regions = np.ascontiguousarray(self.regions, dtype=np.int64).reshape(-1)
        if regions.shape[0] != tets.shape[0]:
            raise MeshError("regions must have one entry per tet")
        for a in (nodes, tets, regions):
            a.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "materials", dict(self.materials))

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def tet_vertices(self) -> np.ndarray:
        return self.nodes[self.tets]

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.tet_vertices())

    def total_volume(self) -> float:
        return float(self.volumes().sum())

    def centroids(self) -> np.ndarray:
        return self.tet_vertices().mean(axis=1)

    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def faces(self):
        """Unique faces and their owning tets.

        Returns ``(face_nodes, owners)`` where ``face_nodes`` is ``(F, 3)``
        sorted node triples in lexicographic order and ``owners`` is
        ``(F, 2)`` tet indices (second entry -1 on boundary faces). Raises
        :class:`MeshError` when a face is shared by more than two tets.
        """
        return _extract_faces(self.tets, self.n_nodes)

    def material_of(self, tet: int) -> Material:
        return self.materials[int(self.regions[tet])]

    def validate(self) -> None:
        """Check every mesh invariant; raise :class:`MeshError` on failure."""
        problems = self.problems(first_only=True)
        if problems:
            raise MeshError(problems[0])

    def problems(self, first_only: bool = False) -> list[str]:
        out: list[str] = []
        if self.n_tets == 0:
            return ["mesh has no tetrahedra"]
        if self.tets.min() < 0 or self.tets.max() >= self.n_nodes:
            return ["tet references a node index out of range"]
        vols = self.volumes()
        bad = np.flatnonzero(~(vols > 0))
        for t in bad[: 1 if first_only else 20]:
            out.append(f"tet {t} has non-positive signed volume {vols[t]:.6e}")
        if out and first_only:
            return out
        missing = sorted(set(np.unique(self.regions).tolist()) - set(self.materials))
        if missing:
            out.append(f"regions without material: {missing}")
            if first_only:
                return out
        try:
            fnodes, owners = self.faces()
        except MeshError as exc:
            return out + [str(exc)]
        bface = fnodes[owners[:, 1] < 0]
        odd = _odd_boundary_edges(bface, self.n_nodes)
        if odd is not None:
            out.append(f"nonconformal face {tuple(int(v) for v in bface[odd])}: "
                       "boundary edge not matched (hanging node)")
            if first_only:
                return out
        hang = _hanging_node(bface, self.nodes)
        if hang is not None:
            f, v = hang
            out.append(f"nonconformal face {tuple(int(x) for x in bface[f])}: node {v} lies on it "
                       "(hanging node)")
            if first_only:
                return out
        pairs = cKDTree(self.nodes).query_pairs(DUPLICATE_TOL, output_type="ndarray")
        if len(pairs):
            i, j = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))[0]]
            out.append(f"duplicate nodes {i} and {j} within {DUPLICATE_TOL} m")
        return out

    def with_materials(self, materials: Mapping[int, Material]) -> "TetMesh":
        return TetMesh(self.nodes, self.tets, self.regions, materials)

    def translated(self, offset) -> "TetMesh":
        return TetMesh(self.nodes + np.asarray(offset, float), self.tets, self.regions, self.materials)


def _face_keys(tri: np.ndarray, n_nodes: int) -> np.ndarray:
    tri = np.sort(tri, axis=-1).astype(np.int64)
    n = np.int64(n_nodes)
    return (tri[..., 0] * n + tri[..., 1]) * n + tri[..., 2]


def _extract_faces(tets: np.ndarray, n_nodes: int):
    local = tets[:, TET_FACES]  # (m, 4, 3)
    keys = _face_keys(local, n_nodes).ravel()
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    uniq, start, counts = np.unique(skeys, return_index=True, return_counts=True)
    if np.any(counts > 2):
        k = np.flatnonzero(counts > 2)[0]
        tri = np.sort(local.reshape(-1, 3)[order[start[k]]])
        raise MeshError(f"nonconformal face {tuple(int(v) for v in tri)} shared by {counts[k]} tets")
    owners = np.full((uniq.size, 2), -1, dtype=np.int64)
    owners[:, 0] = order[start] // 4
    two = counts == 2
    owners[two, 1] = order[start[two] + 1] // 4
    fnodes = np.sort(local.reshape(-1, 3)[order[start]], axis=1)
    return fnodes, owners


def _odd_boundary_edges(bfaces: np.ndarray, n_nodes: int):
    if bfaces.size == 0:
        return None
    e = np.concatenate([bfaces[:, [0, 1]], bfaces[:, [1, 2]], bfaces[:, [0, 2]]])
    e = np.sort(e, axis=1)
    keys = e[:, 0] * np.int64(n_nodes) + e[:, 1]
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    odd = counts[inv] % 2 == 1
    if not np.any(odd):
        return None
    return int(np.flatnonzero(odd)[0] % bfaces.shape[0])


def _hanging_node(bfaces: np.ndarray, nodes: np.ndarray):
    """First ``(face, node)`` where a node lies on a boundary face it does not span.

    Such a node sits on an unmatched interface (a hanging node), which the
    edge-parity check misses when both sides close up separately.
    """
    if bfaces.size == 0:
        return None
    tri = nodes[bfaces]
    cent = tri.mean(axis=1)
    rad = np.linalg.norm(tri - cent[:, None], axis=-1).max(axis=1)
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    normal = np.cross(e1, e2)
    area2 = np.linalg.norm(normal, axis=1)
    tree = cKDTree(nodes)
    cand = tree.query_ball_point(cent, rad * (1 + 1e-9))
    for f, idx in enumerate(cand):
        idx = np.setdiff1d(np.asarray(idx, dtype=np.int64), bfaces[f])
        if not len(idx):
            continue
        d = nodes[idx] - tri[f, 0]
        h = max(np.sqrt(area2[f]), 1e-300)
        off = np.abs(d @ normal[f]) / area2[f]
        # barycentric coordinates in the face plane
        b1 = np.einsum("ij,j->i", np.cross(d, e2[f]), normal[f]) / area2[f] ** 2
        b2 = np.einsum("ij,j->i", np.cross(e1[f], d), normal[f]) / area2[f] ** 2
        tol = 1e-9
        on = (off < tol * h) & (b1 >= -tol) & (b2 >= -tol) & (b1 + b2 <= 1 + tol)
        if np.any(on):
            return f, int(idx[np.flatnonzero(on)[0]])
    return None


# ---------------------------------------------------------------- file I/O

def save_mesh(mesh: TetMesh, path) -> None:
    """Write the ``qem-ascii`` format; coordinates use ``repr`` (bit exact)."""
    lines = ["qemmesh 1", f"{mesh.n_nodes} {mesh.n_tets}"]
    for rid in sorted(mesh.materials):
        m = mesh.materials[rid]
        lines.append(f"# material {rid} {m.name} {m.conductivity!r} {m.relative_permittivity!r}")
    lines += [" ".join(repr(float(c)) for c in p) for p in mesh.nodes]
    lines += [f"{a} {b} {c} {d} {r}" for (a, b, c, d), r in zip(mesh.tets.tolist(), mesh.regions.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, format: str = "qem-ascii", materials: Mapping[int, Material] | None = None,
              validate: bool = True) -> TetMesh:
    """Read a mesh file and validate it.

    Region materials come from ``# material <id> <name> <sigma> <eps_r>``
    comment lines, overridden by ``materials``. Regions left without a
    material are assigned vacuum with a warning.
    """
    path = Path(path)
    if format in ("qem-ascii", "qem"):
        mesh = _read_qem(path)
    elif format in ("msh22", "msh"):
        mesh = _read_msh22(path)
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    mats = dict(mesh.materials)
    if materials:
        mats.update(materials)
    for rid in np.unique(mesh.regions).tolist():
        if rid not in mats:
            log.warning("region %d has no material; assuming vacuum", rid)
            mats[rid] = VACUUM
    mesh = mesh.with_materials(mats)
    if validate:
        mesh.validate()
    return mesh


def _read_qem(path: Path) -> TetMesh:
    header = None
    counts = None
    nodes: list[list[float]] = []
    tets: list[list[int]] = []
    mats: dict[int, Material] = {}
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 5 and parts[0] == "material":
                    try:
                        mats[int(parts[1])] = Material(parts[2], float(parts[3]), float(parts[4]))
                    except ValueError as exc:
                        raise MeshError(f"{path}:{lineno}: bad material line ({exc})") from None
                continue
            parts = line.split()
            try:
                if header is None:
                    if parts != ["qemmesh", "1"]:
                        raise MeshError(f"{path}:{lineno}: expected header 'qemmesh 1'")
                    header = True
                elif counts is None:
                    nn, nt = (int(v) for v in parts)
                    counts = (nn, nt)
                elif len(nodes) < counts[0]:
                    if len(parts) != 3:
                        raise ValueError("node line needs 3 coordinates")
                    nodes.append([float(v) for v in parts])
                elif len(tets) < counts[1]:
                    if len(parts) != 5:
                        raise ValueError("tet line needs 4 indices and a region id")
                    tets.append([int(v) for v in parts])
                else:
                    raise ValueError("unexpected trailing data")
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: parse error: {exc}") from None
    if header is None or counts is None:
        raise MeshError(f"{path}: missing header or counts")
    if len(nodes) != counts[0] or len(tets) != counts[1]:
        raise MeshError(f"{path}: expected {counts[0]} nodes and {counts[1]} tets, "
                        f"found {len(nodes)} and {len(tets)}")
    t = np.array(tets, dtype=np.int64).reshape(-1, 5)
    return TetMesh(np.array(nodes).reshape(-1, 3), t[:, :4], t[:, 4], mats)


def _read_msh22(path: Path) -> TetMesh:
    lines = path.read_text().splitlines()
    i = 0
    ids: dict[int, int] = {}
    coords: list[list[float]] = []
    tets: list[list[int]] = []
    regions: list[int] = []

    def fail(msg):
        raise MeshError(f"{path}:{i + 1}: {msg}")

    try:
        while i < len(lines):
            tag = lines[i].strip()
            if tag == "$MeshFormat":
                ver = lines[i + 1].split()
                if not ver or not ver[0].startswith("2"):
                    fail("only MSH 2.x ASCII is supported")
                i += 3
            elif tag == "$Nodes":
                n = int(lines[i + 1])
                for k in range(n):
                    i_line = i + 2 + k
                    p = lines[i_line].split()
                    ids[int(p[0])] = len(coords)
                    coords.append([float(v) for v in p[1:4]])
                i += n + 3
            elif tag == "$Elements":
                n = int(lines[i + 1])
                for k in range(n):
                    p = [int(v) for v in lines[i + 2 + k].split()]
                    etype, ntags = p[1], p[2]
                    if etype != 4:
                        continue
                    phys = p[3] if ntags > 0 else 0
                    tets.append([ids[v] for v in p[3 + ntags:7 + ntags]])
                    regions.append(phys)
                i += n + 3
            else:
                i += 1
    except (ValueError, IndexError, KeyError) as exc:
        fail(f"parse error: {exc!r}")
    t = np.array(tets, dtype=np.int64).reshape(-1, 4)
    nodes = np.array(coords, dtype=float).reshape(-1, 3)
    if t.size:
        vol = tet_volumes(nodes[t])
        t[vol < 0] = t[vol < 0][:, [1, 0, 2, 3]]
    return TetMesh(nodes, t, np.array(regions, dtype=np.int64), {})


# ------------------------------------------------------------- generators

def _kuhn_pattern() -> np.ndarray:
    corner = lambda v: v[0] + 2 * v[1] + 4 * v[2]  # noqa: E731
    out = []
    for perm in permutations(range(3)):
        p = [0, 0, 0]
        path = [corner(p)]
        for ax in perm:
            p[ax] = 1
            path.append(corner(p))
        out.append(path)
    return np.array(out)


_KUHN = _kuhn_pattern()


def _check_budget(n_tets: int, max_tets: int | None):
    limit = DEFAULT_MAX_TETS if max_tets is None else max_tets
    if n_tets > limit:
        raise MeshError(f"mesh would have {n_tets} tets, above the budget of {limit}")


def _grid_mesh(xs, ys, zs, cell_region: np.ndarray, materials, max_tets=None) -> TetMesh:
    """Kuhn-split the cells of a rectilinear grid with ``cell_region >= 0``."""
    nx, ny, nz = len(xs) - 1, len(ys) - 1, len(zs) - 1
    cells = np.argwhere(cell_region >= 0)
    _check_budget(6 * len(cells), max_tets)
    off = np.array([[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
    corners = cells[:, None, :] + off[None]  # (c, 8, 3)
    gid = (corners[..., 0] * (ny + 1) + corners[..., 1]) * (nz + 1) + corners[..., 2]
    tet_g = gid[:, _KUHN].reshape(-1, 4)
    regions = np.repeat(cell_region[tuple(cells.T)], 6)
    used, inv = np.unique(tet_g, return_inverse=True)
    tets = inv.reshape(-1, 4)
    iz = used % (nz + 1)
    iy = (used // (nz + 1)) % (ny + 1)
    ix = used // ((nz + 1) * (ny + 1))
    nodes = np.column_stack([np.asarray(xs)[ix], np.asarray(ys)[iy], np.asarray(zs)[iz]])
    vol = tet_volumes(nodes[tets])
    tets[vol < 0] = tets[vol < 0][:, [1, 0, 2, 3]]
    return TetMesh(nodes, tets, regions, materials)


def _axis(lo: float, hi: float, h: float) -> np.ndarray:
    n = max(1, math.ceil((hi - lo) / h - 1e-9))
    return np.linspace(lo, hi, n + 1)


def generate_box(dims, h: float, material: Material, origin=(0.0, 0.0, 0.0),
                 max_tets: int | None = None) -> TetMesh:
    """Box ``[origin, origin + dims]`` split into Kuhn tetrahedra.

    Each axis gets ``ceil(L / h)`` equal cells, six tets per cell.
    """
    dims = np.asarray(dims, dtype=float)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise MeshError("box dimensions must be three positive lengths")
    if h <= 0:
        raise MeshError("target edge length must be positive")
    if h > dims.max():
        raise MeshError(f"target edge length {h} exceeds every box dimension")
    o = np.asarray(origin, dtype=float)
    xs, ys, zs = (_axis(o[i], o[i] + dims[i], h) for i in range(3))
    region = np.zeros((len(xs) - 1, len(ys) - 1, len(zs) - 1), dtype=int)
    return _grid_mesh(xs, ys, zs, region, {0: material}, max_tets)


def merge_meshes(meshes: Sequence[TetMesh]) -> TetMesh:
    """Concatenate disjoint meshes (no node welding)."""
    nodes, tets, regions, mats = [], [], [], {}
    offset = 0
    for m in meshes:
        nodes.append(m.nodes)
        tets.append(m.tets + offset)
        regions.append(m.regions)
        offset += m.n_nodes
        for k, v in m.materials.items():
            if mats.get(k, v) != v:
                raise MeshError(f"region {k} has conflicting materials")
            mats[k] = v
    return TetMesh(np.vstack(nodes), np.vstack(tets), np.concatenate(regions), mats)


def generate_patch_array(a: float, b: float, t: float, n: int, h: float, material: Material,
                         max_tets: int | None = None) -> TetMesh:
    """``n x n`` square patches of side ``a``, gap ``b``, thickness ``t``.

    The array is centred on the z axis with patch tops at ``z = 0``; patch
    centres sit on a grid of pitch ``a + b``.
    """
    if b <= 0:
        raise MeshError("patch gap must be positive (patches would overlap)")
    if min(a, t, h) <= 0 or n < 1:
        raise MeshError("patch side, thickness, h must be positive and n >= 1")
    pitch = a + b
    centers = (np.arange(n) - (n - 1) / 2) * pitch
    one = generate_box((a, a, t), h, material, origin=(-a / 2, -a / 2, -t))
    _check_budget(one.n_tets * n * n, max_tets)
    return merge_meshes([one.translated((cx, cy, 0.0)) for cy in centers for cx in centers])


@dataclass(frozen=True)
class GateBox:
    """Axis-aligned gate element spanning ``z`` in ``[-thickness, 0]``."""

    x0: float
    x1: float
    y0: float
    y1: float
    thickness: float

    @classmethod
    def of_class(cls, x0, x1, y0, y1, kind: str):
        t = {"thin": 100e-9, "thick": 150e-9}[kind]
        return cls(x0, x1, y0, y1, t)


def default_gate_layout() -> list[GateBox]:
    """Approximate gate stack inside a 1200 x 650 nm envelope.

    Only the envelope and the two thickness classes are taken from the
    target device; finger widths and gaps are invented placeholders.
    """
    nm = 1e-9
    boxes = [GateBox.of_class(-600 * nm, 600 * nm, -325 * nm, -175 * nm, "thick"),
             GateBox.of_class(-600 * nm, 600 * nm, 175 * nm, 325 * nm, "thick")]
    for cx in (-480, -240, 0, 240, 480):
        boxes.append(GateBox.of_class((cx - 60) * nm, (cx + 60) * nm, -175 * nm, 175 * nm, "thin"))
    return boxes


def generate_gate_layout(boxes: Iterable[GateBox], h: float, material: Material,
                         max_tets: int | None = None) -> TetMesh:
    """Union of gate boxes on one shared grid (conformal at abutting faces)."""
    boxes = list(boxes)
    if not boxes:
        raise MeshError("gate layout needs at least one box")
    for i, p in enumerate(boxes):
        if p.x1 <= p.x0 or p.y1 <= p.y0 or p.thickness <= 0:
            raise MeshError(f"gate box {i} is degenerate")
        for j in range(i):
            q = boxes[j]
            ox = min(p.x1, q.x1) - max(p.x0, q.x0)
            oy = min(p.y1, q.y1) - max(p.y0, q.y0)
            oz = min(p.thickness, q.thickness)
            if ox > 1e-15 and oy > 1e-15 and oz > 0:
                raise MeshError(f"gate boxes {j} and {i} overlap")

    def lines(vals):
        vals = sorted(set(np.round(vals, 15)))
        out = [vals[0]]
        for lo, hi in zip(vals[:-1], vals[1:]):
            out.extend(_axis(lo, hi, h)[1:])
        return np.array(out)

    xs = lines([v for p in boxes for v in (p.x0, p.x1)])
    ys = lines([v for p in boxes for v in (p.y0, p.y1)])
    zs = lines([0.0] + [-p.thickness for p in boxes])
    cx, cy, cz = (0.5 * (a[1:] + a[:-1]) for a in (xs, ys, zs))
    region = np.full((len(cx), len(cy), len(cz)), -1, dtype=int)
    X, Y, Z = np.meshgrid(cx, cy, cz, indexing="ij")
    for p in boxes:
        inside = (X > p.x0) & (X < p.x1) & (Y > p.y0) & (Y < p.y1) & (Z > -p.thickness)
        region[inside] = 0
    return _grid_mesh(xs, ys, zs, region, {0: material}, max_tets)


def generate_ball(radius: float, n: int, material: Material, center=(0.0, 0.0, 0.0),
                  max_tets: int | None = None) -> TetMesh:
    """Ball mesh from an ``n^3`` Kuhn-split cube mapped radially onto a sphere.

    Boundary nodes land exactly on the sphere; interior nodes are blended
    between the cube and sphere maps to limit element distortion.
    """
    if n < 2:
        raise MeshError("ball mesh needs n >= 2 cells per side")
    s = np.linspace(-1.0, 1.0, n + 1)
    region = np.zeros((n, n, n), dtype=int)
    cube = _grid_mesh(s, s, s, region, {0: material}, max_tets)
    p = cube.nodes
    inf = np.abs(p).max(axis=1)
    two = np.linalg.norm(p, axis=1)
    scale = np.ones_like(inf)
    nz = two > 0
    blend = inf[nz] ** 2
    scale[nz] = (inf[nz] / two[nz]) ** blend
    nodes = p * scale[:, None] * radius + np.asarray(center, float)
    mesh = TetMesh(nodes, cube.tets, cube.regions, cube.materials)
    if np.any(mesh.volumes() <= 0):
        raise MeshError("ball mapping produced inverted elements")
    return mesh


# ------------------------------------------------------------- refinement

def refine_region(mesh: TetMesh, center, radius: float, factor: int = 2) -> TetMesh:
    """Refine tets whose centroid lies within ``radius`` of ``center``.

    Marked tets are bisected on their longest edge until their longest edge
    shrinks by ``factor``. Every bisection splits *all* tets sharing the
    edge at the same midpoint, so the mesh stays conformal without a
    separate closure step; neighbours of the region receive transition
    bisections automatically.
    """
    if factor not in (2, 3, 4):
        raise MeshError("refinement factor must be 2, 3 or 4")
    center = np.asarray(center, dtype=float)
    cent = mesh.centroids()
    marked = np.linalg.norm(cent - center, axis=1) < radius
    if not np.any(marked):
        return mesh

    nodes = [tuple(p) for p in mesh.nodes.tolist()]
    tets = {i: tuple(t) for i, t in enumerate(mesh.tets.tolist())}
    region = dict(enumerate(mesh.regions.tolist()))
    edge_tets: dict[tuple[int, int], set[int]] = {}

    def edges_of(t):
        a, b, c, d = t
        return [(a, b), (a, c), (a, d), (b, c), (b, d), (c, d)]

    def add(tid, t):
        tets[tid] = t
        for u, v in edges_of(t):
            edge_tets.setdefault((min(u, v), max(u, v)), set()).add(tid)

    def remove(tid):
        for u, v in edges_of(tets[tid]):
            key = (min(u, v), max(u, v))
            s = edge_tets[key]
            s.discard(tid)
            if not s:
                del edge_tets[key]
        del tets[tid]

    for tid, t in list(tets.items()):
        add(tid, t)

    P = lambda i: np.asarray(nodes[i])  # noqa: E731

    def elen(e):
        return float(np.linalg.norm(P(e[0]) - P(e[1])))

    def longest(t):
        es = [(min(u, v), max(u, v)) for u, v in edges_of(t)]
        return max(es, key=lambda e: (elen(e), -e[0], -e[1]))

    target = max(elen(longest(tets[i])) for i in np.flatnonzero(marked)) / factor
    tol = 1e-9 * target
    next_id = len(tets)
    midpoint: dict[tuple[int, int], int] = {}

    while True:
        todo = []
        for tid, t in tets.items():
            c = np.mean([nodes[v] for v in t], axis=0)
            if np.linalg.norm(c - center) < radius:
                e = longest(t)
                if elen(e) > target + tol:
                    todo.append(e)
        if not todo:
            break
        for e in sorted(set(todo), key=lambda e: (-elen(e), e)):
            if e not in edge_tets:
                continue
            a, b = e
            m = midpoint.get(e)
            if m is None:
                m = len(nodes)
                nodes.append(tuple(0.5 * (P(a) + P(b))))
                midpoint[e] = m
            for tid in sorted(edge_tets[e]):
                t = tets[tid]
                rid = region[tid]
                remove(tid)
                t1 = tuple(m if v == b else v for v in t)
                t2 = tuple(m if v == a else v for v in t)
                add(tid, t1)
                add(next_id, t2)
                region[next_id] = rid
                next_id += 1

    ids = sorted(tets)
    out = TetMesh(np.array(nodes), np.array([tets[i] for i in ids]),
                  np.array([region[i] for i in ids]), mesh.materials)
    return out
