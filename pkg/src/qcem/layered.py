"""Reflected magnetic Green tensor above a planar film.

The in-plane momentum integral is reduced to a radial integral by doing the
azimuthal integral in closed form (Bessel functions). Everything here is
evaluated under the physics convention ``exp(-i w t)``, where the film
permittivity is ``eps_r + i sigma / (w eps0)`` and ``Im k_z >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad_vec
from scipy.special import jv

from .emcore import C0, EPS0, Convention, GreenSample, Provenance, convert
from .mesh import Material


class QuadratureError(RuntimeError):
    """Raised when adaptive quadrature misses its tolerance."""

    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


@dataclass(frozen=True)
class LayeredStack:
    """Film of ``thickness`` occupying ``-t <= z <= 0`` in vacuum.

    ``thickness = inf`` gives a half-space.
    """

    thickness: float
    material: Material

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValueError("film thickness must be positive (or inf)")

    def relative_permittivity(self, omega: float) -> complex:
        """Film ``eps_r`` under the physics convention."""
        m = self.material
        return m.relative_permittivity + 1j * m.conductivity / (omega * EPS0)


@dataclass(frozen=True)
class FresnelCoefficients:
    r_ss: complex | np.ndarray
    r_pp: complex | np.ndarray
    r_sp: complex | np.ndarray
    r_ps: complex | np.ndarray

    def conj(self) -> "FresnelCoefficients":
        return FresnelCoefficients(*(np.conj(v) for v in (self.r_ss, self.r_pp, self.r_sp, self.r_ps)))


@dataclass(frozen=True)
class QuadControl:
    epsrel: float = 1e-8
    epsabs: float = 0.0
    limit: int = 2000


def _kz(k2, q):
    # principal sqrt has Re >= 0; flip so that Im >= 0 (decay toward +z)
    kz = np.sqrt(np.asarray(k2, dtype=complex) - np.asarray(q, dtype=complex) ** 2)
    return np.where(kz.imag < 0, -kz, kz)


def _fresnel_physics(q, omega, stack, kz0=None):
    k0 = omega / C0
    eps = stack.relative_permittivity(omega)
    if kz0 is None:
        kz0 = _kz(k0 * k0, q)
    kz1 = _kz(k0 * k0 * eps, q)
    r_s = (kz0 - kz1) / (kz0 + kz1)
    r_p = (eps * kz0 - kz1) / (eps * kz0 + kz1)
    if math.isinf(stack.thickness):
        return r_s, r_p
    ph = np.exp(2j * kz1 * stack.thickness)
    rs = r_s * (1 - ph) / (1 - r_s * r_s * ph)
    rp = r_p * (1 - ph) / (1 - r_p * r_p * ph)
    return rs, rp


def fresnel_slab(q, omega: float, stack: LayeredStack,
                 convention: Convention = Convention.ENGINEERING) -> FresnelCoefficients:
    """Vacuum/film/vacuum reflection coefficients at in-plane momentum ``q``.

    The cross-polarized coefficients of an isotropic film vanish but are
    carried along so the tensor assembly keeps all four channels.
    """
    if omega <= 0:
        raise ValueError("omega must be > 0")
    if np.any(np.asarray(q) < 0):
        raise ValueError("q must be >= 0")
    rs, rp = _fresnel_physics(np.asarray(q, float), omega, stack)
    zero = np.zeros_like(rs)
    out = FresnelCoefficients(rs[()], rp[()], zero[()], zero[()])
    return out if Convention(convention) is Convention.PHYSICS else out.conj()


# angular basis: 1, cos, sin, cos^2, sin^2, cos*sin  (of the q direction)
_NB = 6


def _polarization_coefficients(q, kz, k0, fr: FresnelCoefficients):
    """Per-q coefficients ``C[b, i, j]`` of the angular basis in ``M(q, phi)``.

    The ``1/q^2`` prefactors of the polarization matrices are already
    absorbed (``q_x = q cos(phi)``, ``q_y = q sin(phi)``).
    """
    shape = np.shape(q)
    C = np.zeros((_NB, 3, 3) + shape, dtype=complex)
    ONE, COS, SIN, CC, SS, CS = range(_NB)
    pp, ss, ps, sp = fr.r_pp, fr.r_ss / k0**2, fr.r_ps / k0, fr.r_sp / k0
    # r_pp / q^2 [[qy^2, -qx qy, 0], [-qx qy, qx^2, 0], 0]
    C[SS, 0, 0] += pp
    C[CS, 0, 1] -= pp
    C[CS, 1, 0] -= pp
    C[CC, 1, 1] += pp
    # r_ss / (k0^2 q^2) u v^T, u = (-qx kz, -qy kz, q^2), v = (qx kz, qy kz, q^2)
    C[CC, 0, 0] -= ss * kz**2
    C[CS, 0, 1] -= ss * kz**2
    C[COS, 0, 2] -= ss * kz * q
    C[CS, 1, 0] -= ss * kz**2
    C[SS, 1, 1] -= ss * kz**2
    C[SIN, 1, 2] -= ss * kz * q
    C[COS, 2, 0] += ss * q * kz
    C[SIN, 2, 1] += ss * q * kz
    C[ONE, 2, 2] += ss * q**2
    # r_ps / (k0 q^2)
    C[CS, 0, 0] += ps * kz
    C[SS, 0, 1] += ps * kz
    C[SIN, 0, 2] += ps * q
    C[CC, 1, 0] -= ps * kz
    C[CS, 1, 1] -= ps * kz
    C[COS, 1, 2] -= ps * q
    # r_sp / (k0 q^2)
    C[CS, 0, 0] -= sp * kz
    C[CC, 0, 1] += sp * kz
    C[SS, 1, 0] -= sp * kz
    C[CS, 1, 1] += sp * kz
    C[SIN, 2, 0] += sp * q
    C[COS, 2, 1] -= sp * q
    return C


def _angular_integrals(x, psi):
    """``int_0^{2 pi} b(phi) exp(i x cos(phi - psi)) dphi`` for the basis ``b``."""
    j0, j1, j2 = jv(0, x), jv(1, x), jv(2, x)
    c, s = math.cos(psi), math.sin(psi)
    c2, s2 = math.cos(2 * psi), math.sin(2 * psi)
    return np.stack([
        2 * np.pi * j0,
        2j * np.pi * j1 * c,
        2j * np.pi * j1 * s,
        np.pi * (j0 - j2 * c2),
        np.pi * (j0 + j2 * c2),
        -np.pi * j2 * s2,
    ])


def _radial_integrand(q, kz, jacobian, omega, stack, rho, psi, zsum):
    """Integrand of the radial integral with ``q dq / k_z`` folded into ``jacobian``."""
    k0 = omega / C0
    rs, rp = _fresnel_physics(q, omega, stack, kz0=kz)
    zero = np.zeros_like(rs)
    C = _polarization_coefficients(q, kz, k0, FresnelCoefficients(rs, rp, zero, zero))
    A = _angular_integrals(q * rho, psi)
    M = np.einsum("bij...,b...->ij...", C, A)
    return M * (jacobian * np.exp(1j * kz * zsum))


def reflected_Gm_layered(r_i, r_j, omega: float, stack: LayeredStack,
                         quad: QuadControl | None = None) -> GreenSample:
    """Reflected magnetic Green tensor above the film (physics convention).

    The radial integral is split at ``q = k0``. On ``[0, k0)`` the substitution
    ``q = k0 sin(theta)`` removes the ``1/k_z`` endpoint singularity; beyond,
    ``q = k0 cosh(u)`` up to ``q_max = max(60 / (z_i + z_j), 50 k0)``.
    """
    quad = quad or QuadControl()
    r_i = np.asarray(r_i, dtype=float)
    r_j = np.asarray(r_j, dtype=float)
    if r_i[2] <= 0 or r_j[2] <= 0:
        raise ValueError("observation points must lie above the film (z > 0)")
    if omega <= 0:
        raise ValueError("omega must be > 0")
    k0 = omega / C0
    zsum = r_i[2] + r_j[2]
    d = r_i[:2] - r_j[:2]
    rho = float(np.hypot(*d))
    psi = float(math.atan2(d[1], d[0])) if rho > 0 else 0.0

    m = stack.material
    if m.conductivity == 0 and m.relative_permittivity == 1:
        return GreenSample(r_i, r_j, omega, np.zeros((3, 3)), Provenance.LAYERED)

    def prop(theta):
        q = k0 * np.sin(theta)
        kz = k0 * np.cos(theta) + 0j
        return _radial_integrand(q, kz, k0 * np.sin(theta), omega, stack, rho, psi, zsum)

    def evan(u):
        q = k0 * np.cosh(u)
        kz = 1j * k0 * np.sinh(u)
        return _radial_integrand(q, kz, -1j * k0 * np.cosh(u), omega, stack, rho, psi, zsum)

    q_max = max(60.0 / zsum, 50.0 * k0)
    u_max = math.acosh(q_max / k0)
    # breakpoints at the geometric scales the integrand resolves
    scales = [1.0 / zsum, 1.0 / zsum * 0.1]
    if math.isfinite(stack.thickness):
        scales.append(1.0 / stack.thickness)
    if m.conductivity > 0:
        scales.append(math.sqrt(omega * 4e-7 * math.pi * m.conductivity / 2))
    if rho > 0:
        scales.append(1.0 / rho)
    pts = sorted({math.acosh(s / k0) for s in scales if k0 < s < q_max})

    total = np.zeros((3, 3), dtype=complex)
    err_total = 0.0
    for f, a, b, points in ((prop, 0.0, math.pi / 2, None), (evan, 0.0, u_max, pts or None)):
        val, err, info = quad_vec(f, a, b, epsrel=quad.epsrel, epsabs=quad.epsabs, norm="max",
                                  limit=quad.limit, points=points, full_output=True)
        scale = np.max(np.abs(val))
        if not info.success or err > max(quad.epsabs, 10 * quad.epsrel * scale):
            raise QuadratureError("radial integral did not converge", err)
        total += val
        err_total += err
    G = 1j / (8 * np.pi**2) * total
    return GreenSample(r_i, r_j, omega, G, Provenance.LAYERED)


def reflected_Gm_layered_engineering(r_i, r_j, omega, stack, quad=None) -> np.ndarray:
    return convert(reflected_Gm_layered(r_i, r_j, omega, stack, quad).tensor,
                   Convention.PHYSICS, Convention.ENGINEERING)
