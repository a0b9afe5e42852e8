"""Reflected magnetic dyadic Green's tensor from either geometry backend.

For a mesh scene the tensor is extracted from three VIE solves with unit
magnetic dipoles along x, y, z at ``r_j``; column ``k`` is the scattered
``H(r_i) / k0**2`` for the dipole along axis ``k``. Only the scattered part
is returned, so coincident points are allowed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .emcore import Convention, GreenSample, Provenance, convert, wavenumber
from .layered import LayeredStack, QuadControl, reflected_Gm_layered
from .mesh import TetMesh
from .vie import (AssemblyOptions, VIESystem, assemble, build_swg_space, check_observation,
                  dipole_rhs, factorize, scattered_H, solve)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scene:
    """Geometry backend: a tetrahedral ``mesh`` or a planar ``stack``, not both."""

    mesh: TetMesh | None = None
    stack: LayeredStack | None = None
    assembly: AssemblyOptions = field(default_factory=AssemblyOptions)
    quad: QuadControl = field(default_factory=QuadControl)

    def __post_init__(self):
        if (self.mesh is None) == (self.stack is None):
            raise ValueError("a scene needs exactly one of mesh or stack")

    @property
    def backend(self) -> str:
        return "vie" if self.mesh is not None else "layered"


class _Frequency:
    """Assembled and factorized VIE system at one frequency (``None`` if kappa is 0)."""

    def __init__(self, scene: Scene, omega: float):
        self.omega = float(omega)
        self.space = build_swg_space(scene.mesh, omega)
        self.system: VIESystem | None = None
        if np.any(self.space.kappa != 0):
            self.system = factorize(assemble(self.space, scene.assembly))

    def check(self, r) -> None:
        check_observation(self.space, r)

    def columns(self, r_j) -> list:
        """Solutions for unit dipoles along x, y, z at ``r_j``."""
        rhs = np.column_stack([dipole_rhs(self.space, r_j, e) for e in np.eye(3)])
        return solve(self.system, rhs)

    def tensor(self, sols, r_i) -> np.ndarray:
        k0 = wavenumber(self.omega)
        G = np.column_stack([scattered_H(s, r_i, check=False) for s in sols]) / k0**2
        return convert(G, Convention.ENGINEERING, Convention.PHYSICS)


def _zero(r_i, r_j, omega):
    return GreenSample(r_i, r_j, omega, np.zeros((3, 3), dtype=complex), Provenance.VIE)


def magnetic_green_tensor(scene: Scene, r_i, r_j, omega: float) -> GreenSample:
    """Reflected ``G_m(r_i, r_j, omega)`` in the physics convention."""
    return green_scan(scene, [(r_i, r_j)], [omega])[0]


def green_scan(scene: Scene, pairs, omegas) -> list[GreenSample]:
    """Samples for every ``(omega, pair)``, frequency-major.

    The VIE backend assembles and factorizes once per frequency and solves
    once per distinct source point, so results match per-pair calls exactly.
    """
    pairs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in pairs]
    omegas = [float(w) for w in np.atleast_1d(omegas)]
    for w in omegas:
        if not w > 0:
            raise ValueError("omega must be > 0")
    for a, b in pairs:
        if a.shape != (3,) or b.shape != (3,):
            raise ValueError("points must be 3-vectors")
    out = []
    if scene.backend == "layered":
        for w in omegas:
            for a, b in pairs:
                out.append(reflected_Gm_layered(a, b, w, scene.stack, scene.quad))
        return out

    for w in omegas:
        freq = _Frequency(scene, w)
        for a, b in pairs:
            freq.check(a)
            freq.check(b)
        if freq.system is None:
            out.extend(_zero(a, b, w) for a, b in pairs)
            continue
        cache = {}
        for a, b in pairs:
            key = b.tobytes()
            if key not in cache:
                cache[key] = freq.columns(b)
            out.append(GreenSample(a, b, w, freq.tensor(cache[key], a), Provenance.VIE))
        # release the dense matrix and factors before the next frequency
        del freq, cache
    return out
