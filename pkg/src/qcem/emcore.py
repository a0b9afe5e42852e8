"""Physical constants, time-harmonic conventions and free-space kernels.

Internally every field quantity is computed under the engineering
convention ``exp(+j w t)``; :func:`to_physics` conjugates values that are
handed to the qubit layer, where ``Im G`` must be nonnegative for a lossy
environment.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhysicalConstants:
    """CODATA 2018 values in SI units."""

    c: float = 299792458.0
    mu0: float = 1.25663706212e-6
    eps0: float = 8.8541878128e-12
    hbar: float = 1.054571817e-34
    kb: float = 1.380649e-23
    muB: float = 9.2740100783e-24


CONST = PhysicalConstants()
C0 = CONST.c
MU0 = CONST.mu0
EPS0 = CONST.eps0
HBAR = CONST.hbar
KB = CONST.kb
MU_B = CONST.muB


class Convention(str, enum.Enum):
    PHYSICS = "physics"  # exp(-i w t)
    ENGINEERING = "engineering"  # exp(+j w t)


def convert(value, src: Convention, dst: Convention):
    """Convert a field/Green quantity between time-harmonic conventions."""
    src, dst = Convention(src), Convention(dst)
    if src is dst:
        return value
    return np.conj(value)


def to_physics(value, src: Convention = Convention.ENGINEERING):
    return convert(value, src, Convention.PHYSICS)


@dataclass(frozen=True)
class BathSpec:
    """Electromagnetic bath: temperature (K) and dephasing cutoff (rad/s)."""

    temperature: float = 0.0
    dephasing_cutoff: float = 2 * np.pi * 10e6

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("bath temperature must be >= 0")
        if self.dephasing_cutoff <= 0:
            raise ValueError("dephasing cutoff must be > 0")

    def nbar(self, omega):
        return mean_photon_number(omega, self.temperature)


def wavenumber(omega: float) -> float:
    return omega / C0


def _separation(r, rp):
    d = np.asarray(r, dtype=float) - np.asarray(rp, dtype=float)
    R = np.sqrt(np.sum(d * d, axis=-1))
    if np.any(R == 0.0):
        raise ValueError("coincident source and observation points")
    return d, R


def scalar_green(r, rp, k0: float, convention: Convention = Convention.ENGINEERING):
    """Free-space scalar Green's function ``exp(-j k0 R) / (4 pi R)``.

    Broadcasts over leading axes of ``r`` and ``rp`` (shape ``(..., 3)``).
    """
    if k0 < 0:
        raise ValueError("k0 must be >= 0")
    _, R = _separation(r, rp)
    g = np.exp(-1j * k0 * R) / (4 * np.pi * R)
    return convert(g, Convention.ENGINEERING, convention)


def grad_scalar_green(r, rp, k0: float, convention: Convention = Convention.ENGINEERING):
    """Gradient of :func:`scalar_green` with respect to ``r``."""
    d, R = _separation(r, rp)
    R_ = R[..., None]
    grad = -(1 + 1j * k0 * R_) * np.exp(-1j * k0 * R_) / (4 * np.pi * R_**3) * d
    return convert(grad, Convention.ENGINEERING, convention)


def incident_E_magnetic_dipole(r_obs, r_src, m, omega: float):
    """Electric field of a point magnetic dipole ``m`` (A m^2) in vacuum.

    ``E = -j w mu0 grad g x m`` (engineering convention). ``r_obs`` may carry
    leading axes; ``m`` is a complex 3-vector.
    """
    if omega <= 0:
        raise ValueError("omega must be > 0")
    grad = grad_scalar_green(r_obs, r_src, omega / C0)
    m = np.broadcast_to(np.asarray(m, dtype=complex), grad.shape)
    return -1j * omega * MU0 * np.cross(grad, m)


def incident_H_magnetic_dipole(r_obs, r_src, m, omega: float):
    """Magnetic field of a point magnetic dipole in vacuum (engineering)."""
    k = omega / C0
    d, R = _separation(r_obs, r_src)
    R_ = R[..., None]
    n = d / R_
    m = np.broadcast_to(np.asarray(m, dtype=complex), d.shape)
    ndotm = np.sum(n * m, axis=-1, keepdims=True)
    phase = np.exp(-1j * k * R_) / (4 * np.pi * R_)
    far = k**2 * (m - n * ndotm)
    near = (3 * n * ndotm - m) * (1 / R_**2 + 1j * k / R_)
    return phase * (far + near)


def free_space_Gm_im(omega: float) -> np.ndarray:
    """Coincident-point ``Im G_m^0 = w / (6 pi c) I`` (physics convention)."""
    if omega < 0:
        raise ValueError("omega must be >= 0")
    return (omega / (6 * np.pi * C0)) * np.eye(3)


def mean_photon_number(omega, temperature: float):
    """Bose-Einstein occupation ``1 / (exp(hbar w / kb T) - 1)``."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("omega must be > 0 for the Bose factor")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        out = np.zeros_like(omega)
    else:
        x = HBAR * omega / (KB * temperature)
        with np.errstate(over="ignore"):
            out = 1.0 / np.expm1(x)
    return out[()] if out.ndim == 0 else out


class Provenance(str, enum.Enum):
    VIE = "vie"
    LAYERED = "layered"
    FREE_SPACE = "free-space"


@dataclass(frozen=True, eq=False)
class GreenSample:
    """Reflected magnetic Green tensor ``G_m(r_i, r_j, w)`` in 1/m.

    ``tensor`` is stored under the physics convention.
    """

    r_i: np.ndarray
    r_j: np.ndarray
    omega: float
    tensor: np.ndarray
    provenance: Provenance
    convention: Convention = Convention.PHYSICS

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=complex)
        if t.shape != (3, 3):
            raise ValueError("Green tensor must be 3x3")
        if not np.all(np.isfinite(t)):
            raise ValueError("Green tensor has non-finite entries")
        object.__setattr__(self, "tensor", t)
        object.__setattr__(self, "r_i", np.asarray(self.r_i, dtype=float))
        object.__setattr__(self, "r_j", np.asarray(self.r_j, dtype=float))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "convention", Convention(self.convention))

    @property
    def physics(self) -> np.ndarray:
        return convert(self.tensor, self.convention, Convention.PHYSICS)

    @property
    def coincident(self) -> bool:
        return bool(np.array_equal(self.r_i, self.r_j))


def psd_margin(matrix) -> float:
    """``min eig / max |eig|`` of the Hermitian part (0 for a zero matrix)."""
    m = np.asarray(matrix)
    h = 0.5 * (m + m.conj().T)
    ev = np.linalg.eigvalsh(h)
    scale = np.max(np.abs(ev))
    return 0.0 if scale == 0 else float(ev[0] / scale)


def is_psd(matrix, rtol: float = 1e-8) -> bool:
    return psd_margin(matrix) >= -rtol
