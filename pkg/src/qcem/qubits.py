"""Spin-qubit relaxation and dephasing rates, Lindblad dynamics and gate fidelity.

Green tensors enter under the physics convention, where a passive
environment has a positive semidefinite coincident-point ``Im G_m``.
Computational basis ordering puts qubit 0 in the most significant bit; a
single qubit has ``|0> = (1, 0)`` (ground) and ``|1> = (0, 1)`` (excited).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .emcore import C0, HBAR, MU0, MU_B, BathSpec, Convention, GreenSample, convert, mean_photon_number

log = logging.getLogger(__name__)

# |omega_i - omega_j| / (omega_i + omega_j) above which the rotating-wave
# pairing at omega_+ is flagged
REGIME_RATIO = 0.1


class RateError(ValueError):
    pass


class InvariantError(RuntimeError):
    """A density matrix left its invariants during evolution."""


class RegimeWarning(UserWarning):
    pass


# ------------------------------------------------------------------ qubits

def _transverse_frame(axis):
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)
    trial = np.eye(3)[int(np.argmin(np.abs(n)))]
    e1 = trial - (trial @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2, n


@dataclass(frozen=True, eq=False)
class QubitSpec:
    """Point spin qubit.

    Parameters
    ----------
    position : (3,) m
    frequency : rad/s
    axis : unit quantization axis
    transverse_moment, longitudinal_moment : J/T, default Bohr magneton
    """

    position: np.ndarray
    frequency: float
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    transverse_moment: float = MU_B
    longitudinal_moment: float = MU_B

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError("quantization axis must be a unit 3-vector")
        object.__setattr__(self, "axis", axis)
        if self.position.shape != (3,):
            raise ValueError("position must be a 3-vector")
        if not self.frequency > 0:
            raise ValueError("qubit frequency must be > 0")
        if self.transverse_moment < 0 or self.longitudinal_moment < 0:
            raise ValueError("moment magnitudes must be >= 0")

    @property
    def m_eg(self) -> np.ndarray:
        """Transverse moment ``|m| (e1 - i e2) / sqrt(2)``."""
        e1, e2, _ = _transverse_frame(self.axis)
        return self.transverse_moment * (e1 - 1j * e2) / math.sqrt(2.0)

    @property
    def m_ge(self) -> np.ndarray:
        return np.conj(self.m_eg)

    @property
    def m_par(self) -> np.ndarray:
        return self.longitudinal_moment * self.axis


# --------------------------------------------------------------- Green source

def _as_tensor(value) -> np.ndarray:
    if isinstance(value, GreenSample):
        return value.physics
    return np.asarray(value, dtype=complex)


def _green_lookup(greens, requests):
    """Physics-convention tensors for ``requests = [(r_i, r_j, omega), ...]``.

    ``greens`` is a :class:`qcem.greens.Scene` (sampled with one
    factorization per frequency) or a callable ``(r_i, r_j, omega)``
    returning a :class:`GreenSample` or a 3x3 physics-convention array.
    """
    from .greens import Scene, green_scan

    if isinstance(greens, Scene):
        by_omega: dict[float, list[int]] = {}
        for k, (_, _, w) in enumerate(requests):
            by_omega.setdefault(float(w), []).append(k)
        out = [None] * len(requests)
        for w, idx in by_omega.items():
            samples = green_scan(greens, [(requests[k][0], requests[k][1]) for k in idx], [w])
            for k, s in zip(idx, samples):
                out[k] = s.physics
        return out
    return [_as_tensor(greens(a, b, w)) for a, b, w in requests]


# -------------------------------------------------------------- relaxation

@dataclass(frozen=True, eq=False)
class RateSet:
    """Relaxation matrix ``gamma`` (1/s), Bose factors and optional dephasing.

    ``nbar[i, j]`` and ``omega_plus[i, j]`` are evaluated at
    ``(omega_i + omega_j) / 2``. ``dephasing`` maps ``t`` to an ``N x N``
    rate matrix (1/s).
    """

    gamma: np.ndarray
    nbar: np.ndarray
    omega_plus: np.ndarray
    dephasing: Callable[[float], np.ndarray] | None = None

    @property
    def n_qubits(self) -> int:
        return self.gamma.shape[0]

    def with_dephasing(self, dephasing) -> "RateSet":
        return RateSet(self.gamma, self.nbar, self.omega_plus, dephasing)


def _pair_frequencies(qubits, regime_ratio):
    w = np.array([q.frequency for q in qubits])
    wp = 0.5 * (w[:, None] + w[None, :])
    ratio = np.abs(w[:, None] - w[None, :]) / (w[:, None] + w[None, :])
    worst = float(ratio.max()) if len(w) else 0.0
    if worst >= regime_ratio:
        warnings.warn(f"qubit detuning ratio |wi - wj| / (wi + wj) = {worst:.3g} is not small; "
                      f"pair rates at the mean frequency may be inaccurate", RegimeWarning, stacklevel=3)
    return wp


def rate_prefactor(omega: float) -> float:
    """``2 mu0 k0^2 / hbar``."""
    return 2.0 * MU0 * (omega / C0) ** 2 / HBAR


def relaxation_rates(qubits: Sequence[QubitSpec], greens, bath: BathSpec,
                     regime_ratio: float = REGIME_RATIO) -> RateSet:
    """``Gamma_ij = (2 mu0 k0^2 / hbar) m_i^eg . Im G_m(r_i, r_j, w_+) . m_j^ge``.

    Diagonal entries use ``w_i``. Off-diagonal entries are computed for
    ``i < j`` and mirrored as ``Gamma_ji = conj(Gamma_ij)``, which is exact
    for a reciprocal environment and keeps the matrix Hermitian.
    """
    qubits = list(qubits)
    n = len(qubits)
    if n == 0:
        raise ValueError("need at least one qubit")
    wp = _pair_frequencies(qubits, regime_ratio)
    requests, slots = [], []
    for i in range(n):
        for j in range(i, n):
            requests.append((qubits[i].position, qubits[j].position, wp[i, j]))
            slots.append((i, j))
    tensors = _green_lookup(greens, requests)
    gamma = np.zeros((n, n), dtype=complex)
    for (i, j), G in zip(slots, tensors):
        val = rate_prefactor(wp[i, j]) * (qubits[i].m_eg @ G.imag @ qubits[j].m_ge)
        gamma[i, j] = val
        gamma[j, i] = np.conj(val)
    gamma[np.diag_indices(n)] = gamma.diagonal().real
    nbar = np.asarray(mean_photon_number(wp, bath.temperature), dtype=float).reshape(n, n)
    return RateSet(gamma, nbar, wp)


def t1_from_rate(gamma_ii: float, nbar: float) -> float:
    """``T1 = 1 / (3 (2 nbar + 1) Gamma_ii)``."""
    if not gamma_ii > 0:
        raise RateError("relaxation rate must be > 0 to define T1")
    if nbar < 0:
        raise RateError("mean photon number must be >= 0")
    return 1.0 / (3.0 * (2.0 * nbar + 1.0) * gamma_ii)


# --------------------------------------------------------------- dephasing

@dataclass(frozen=True, eq=False)
class DephasingSpectrum:
    """``Im G_m(r_i, r_j, w)`` samples on an increasing frequency grid.

    ``im_g`` has shape ``(K, N, N, 3, 3)`` (physics convention).
    """

    omegas: np.ndarray
    im_g: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omegas, dtype=float)
        g = np.asarray(self.im_g, dtype=float)
        if w.ndim != 1 or len(w) < 2 or np.any(w <= 0) or np.any(np.diff(w) <= 0):
            raise ValueError("spectrum frequencies must be positive and increasing")
        if g.shape[0] != len(w) or g.shape[-2:] != (3, 3) or g.shape[1] != g.shape[2]:
            raise ValueError("im_g must have shape (K, N, N, 3, 3)")
        object.__setattr__(self, "omegas", w)
        object.__setattr__(self, "im_g", g)


def spectrum_grid(omega_c: float, points_per_decade: int = 5, decades: float = 4.0) -> np.ndarray:
    """Log grid over ``[omega_c / 10**decades, omega_c]``."""
    n = int(round(points_per_decade * decades)) + 1
    return omega_c * np.logspace(-decades, 0.0, n)


def sample_spectrum(qubits: Sequence[QubitSpec], greens, omegas) -> DephasingSpectrum:
    """Sample ``Im G_m`` between all qubit pairs on ``omegas``."""
    qubits = list(qubits)
    n = len(qubits)
    omegas = np.asarray(omegas, dtype=float)
    requests, slots = [], []
    for k, w in enumerate(omegas):
        for i in range(n):
            for j in range(i, n):
                requests.append((qubits[i].position, qubits[j].position, w))
                slots.append((k, i, j))
    tensors = _green_lookup(greens, requests)
    im = np.zeros((len(omegas), n, n, 3, 3))
    for (k, i, j), G in zip(slots, tensors):
        im[k, i, j] = G.imag
        im[k, j, i] = G.imag.T
    return DephasingSpectrum(omegas, im)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _segment_nodes(a, b):
    x = 0.5 * (b - a)[:, None] * _GL_X[None] + 0.5 * (b + a)[:, None]
    w = 0.5 * (b - a)[:, None] * _GL_W[None]
    return x.ravel(), w.ravel()


def _powerlaw_interp(grid, s, x):
    """Piecewise log-log interpolation of ``s`` on ``grid`` at ``x`` (>= grid[0]).

    Segments whose endpoints differ in sign or touch zero use linear
    interpolation instead.
    """
    k = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    s0, s1 = s[k], s[k + 1]
    w0, w1 = grid[k], grid[k + 1]
    same = (s0 * s1) > 0
    out = s0 + (s1 - s0) * (x - w0) / (w1 - w0)
    if np.any(same):
        p = np.log(s1[same] / s0[same]) / np.log(w1[same] / w0[same])
        out[same] = s0[same] * (x[same] / w0[same]) ** p
    return out


def _low_exponent(grid, s):
    """Power of the extrapolation below the first sample (needs > -1)."""
    if s[0] * s[1] > 0:
        p = math.log(s[1] / s[0]) / math.log(grid[1] / grid[0])
        if p > -1.0:
            return p
    return 0.0


def sine_weighted_integral(grid, s, t: float, omega_c: float) -> float:
    """``int_0^omega_c sin(w t) / w * s(w) dw`` for samples ``s`` on ``grid``.

    The integrand is split at the grid points and at the zeros of
    ``sin(w t)``; each piece uses 16-point Gauss-Legendre. Below ``grid[0]``
    ``s`` is extended as the power law of the first segment and integrated
    in the variable ``w**(p + 1)``, which absorbs the endpoint behaviour.
    """
    if t == 0:
        return 0.0
    grid = np.asarray(grid, dtype=float)
    s = np.asarray(s, dtype=float)
    top = min(omega_c, grid[-1])
    cuts = [grid[(grid > 0) & (grid < top)]]
    if t * top > math.pi:
        zeros = math.pi / t * np.arange(1, int(t * top / math.pi) + 1)
        cuts.append(zeros)
    pts = np.unique(np.concatenate([[grid[0], top], *cuts]))
    pts = pts[(pts >= grid[0]) & (pts <= top)]
    x, w = _segment_nodes(pts[:-1], pts[1:])
    total = float(np.sum(w * np.sin(x * t) / x * _powerlaw_interp(grid, s, x)))

    # [0, grid[0]]: s = s0 (w / w0)^p, integrate in v = w^(p+1)
    p = _low_exponent(grid, s)
    w0 = grid[0]
    lo = [0.0]
    if t * w0 > math.pi:
        lo.extend(math.pi / t * np.arange(1, int(t * w0 / math.pi) + 1))
    lo.append(w0)
    edges = np.unique(np.asarray(lo)) ** (p + 1.0)
    v, wv = _segment_nodes(edges[:-1], edges[1:])
    om = v ** (1.0 / (p + 1.0))
    coef = s[0] / w0**p / (p + 1.0)
    total += float(np.sum(wv * coef * np.sin(om * t) / om))
    return total


def dephasing_prefactor() -> float:
    """``4 mu0 / (hbar pi)``."""
    return 4.0 * MU0 / (HBAR * math.pi)


class DephasingRates:
    """Callable ``t -> gamma_phi(t)`` (``N x N``, 1/s) built from a spectrum."""

    def __init__(self, qubits: Sequence[QubitSpec], spectrum: DephasingSpectrum, bath: BathSpec,
                 min_points_per_decade: float = 4.0):
        qubits = list(qubits)
        w = spectrum.omegas
        wc = bath.dephasing_cutoff
        n = len(qubits)
        if spectrum.im_g.shape[1] != n:
            raise ValueError("spectrum qubit count does not match")
        if w[-1] < wc * (1 - 1e-12):
            raise ValueError(f"spectrum stops at {w[-1]:.4g} rad/s, below the cutoff {wc:.4g} rad/s")
        inside = w[w <= wc * (1 + 1e-12)]
        if len(inside) >= 2:
            gap = np.max(np.diff(np.log10(np.append(inside, wc) if inside[-1] < wc else inside)))
            if gap > 1.0 / min_points_per_decade + 1e-9:
                raise ValueError(f"spectrum is too sparse: {1 / gap:.2f} points per decade "
                                 f"(need {min_points_per_decade})")
        nbar = np.asarray(mean_photon_number(w, bath.temperature), dtype=float)
        m = np.array([q.m_par for q in qubits])
        # s_ij(w) = (nbar + 1/2) (w / c)^2 m_i . Im G . m_j
        self.samples = (nbar + 0.5)[:, None, None] * (w / C0)[:, None, None] ** 2 * \
            np.einsum("ia,kijab,jb->kij", m, spectrum.im_g, m)
        self.omegas = w
        self.cutoff = wc
        self.n_qubits = n

    def __call__(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("time must be >= 0")
        out = np.zeros((self.n_qubits, self.n_qubits))
        if t == 0:
            return out
        for i in range(self.n_qubits):
            for j in range(i, self.n_qubits):
                val = sine_weighted_integral(self.omegas, self.samples[:, i, j], t, self.cutoff)
                out[i, j] = out[j, i] = dephasing_prefactor() * val
        return out


def dephasing_rates(qubits, spectrum: DephasingSpectrum, bath: BathSpec, t: float) -> np.ndarray:
    """``gamma_phi_ij(t) = (4 mu0 / hbar pi) int_0^wc sin(w t)/w s_ij(w) dw``."""
    return DephasingRates(qubits, spectrum, bath)(t)


# ---------------------------------------------------------------- Lindblad

def _site_ops(n: int):
    """``sigma^-``, ``sigma^+`` and the diagonal of ``sigma^z`` at every site."""
    sm1 = np.array([[0.0, 1.0], [0.0, 0.0]])        # |0><1|
    lower, raise_, zdiag = [], [], []
    for i in range(n):
        left = np.eye(2**i)
        right = np.eye(2 ** (n - i - 1))
        op = np.kron(np.kron(left, sm1), right)
        lower.append(op)
        raise_.append(op.T.copy())
        bits = (np.arange(2**n) >> (n - 1 - i)) & 1
        zdiag.append(np.where(bits == 1, 1.0, -1.0))
    return lower, raise_, np.array(zdiag)


@dataclass(frozen=True, eq=False)
class LindbladGenerator:
    """Relaxation plus dephasing dissipator on ``2**n`` dimensional states."""

    n_qubits: int
    weights_down: np.ndarray       # (nbar + 1) Gamma
    weights_up: np.ndarray         # nbar Gamma
    dephasing: Callable[[float], np.ndarray] | None
    lower: list
    raise_: list
    zdiag: np.ndarray
    k_down: np.ndarray
    k_up: np.ndarray

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    def dephasing_mask(self, t: float) -> np.ndarray:
        """Elementwise factor ``M`` with ``L_phi[rho] = M * rho``."""
        d = self.dim
        if self.dephasing is None:
            return np.zeros((d, d))
        g = np.asarray(self.dephasing(t))
        z = self.zdiag
        zz = np.einsum("ia,ja->ija", z, z)                       # (N, N, d)
        M = (np.einsum("ij,ia,jb->ab", g, z, z)
             - 0.5 * np.einsum("ij,ija->a", g, zz)[:, None]
             - 0.5 * np.einsum("ij,ija->a", g, zz)[None, :])
        return M

    def __call__(self, rho, t: float = 0.0) -> np.ndarray:
        rho = np.asarray(rho, dtype=complex)
        out = -0.5 * (self.k_down @ rho + rho @ self.k_down) - 0.5 * (self.k_up @ rho + rho @ self.k_up)
        n = self.n_qubits
        for i in range(n):
            for j in range(n):
                wd, wu = self.weights_down[i, j], self.weights_up[i, j]
                if wd != 0:
                    out += wd * (self.lower[i] @ rho @ self.raise_[j])
                if wu != 0:
                    out += wu * (self.raise_[i] @ rho @ self.lower[j])
        if self.dephasing is not None:
            out += self.dephasing_mask(t) * rho
        return out


def build_lindblad(rates: RateSet, bath: BathSpec | None = None, hermitian_tol: float = 1e-12) -> LindbladGenerator:
    """Dissipator for ``rates``.

    Downward terms carry ``(nbar + 1) Gamma_ij`` and upward terms
    ``nbar Gamma_ij`` (Bose factor at ``w_+``). The anticommutator partner of
    the jump term ``s_i rho s_j^dagger`` is ``s_j^dagger s_i``, which keeps the
    trace for any Hermitian ``Gamma``.
    """
    G = np.asarray(rates.gamma, dtype=complex)
    scale = max(float(np.max(np.abs(G))), 1e-300)
    if np.max(np.abs(G - G.conj().T)) > hermitian_tol * scale:
        raise RateError("relaxation matrix is not Hermitian")
    n = G.shape[0]
    nbar = np.asarray(rates.nbar, dtype=float)
    wd = (nbar + 1.0) * G
    wu = nbar * G
    lower, raise_, z = _site_ops(n)
    d = 2**n
    kd = np.zeros((d, d), dtype=complex)
    ku = np.zeros((d, d), dtype=complex)
    for i in range(n):
        for j in range(n):
            kd += wd[i, j] * (raise_[j] @ lower[i])
            ku += wu[i, j] * (lower[j] @ raise_[i])
    return LindbladGenerator(n, wd, wu, rates.dephasing, lower, raise_, z, kd, ku)


def zero_generator(n_qubits: int) -> LindbladGenerator:
    z = np.zeros((n_qubits, n_qubits))
    return build_lindblad(RateSet(z, z, z))


# ----------------------------------------------------------------- gates

def basis_state(index: int, n_qubits: int) -> np.ndarray:
    v = np.zeros(2**n_qubits, dtype=complex)
    v[index] = 1.0
    return np.outer(v, v.conj())


def default_initial_states(n_qubits: int) -> list[np.ndarray]:
    """Computational basis; a single qubit also gets ``|+>`` and ``|->``."""
    states = [basis_state(k, n_qubits) for k in range(2**n_qubits)]
    if n_qubits == 1:
        for sgn in (1.0, -1.0):
            v = np.array([1.0, sgn], dtype=complex) / math.sqrt(2.0)
            states.append(np.outer(v, v.conj()))
    return states


@dataclass(frozen=True, eq=False)
class GateSpec:
    """Target unitary, duration and piecewise-constant control Hamiltonian.

    ``control`` is a list of ``(duration_s, H_joule)`` pieces applied in
    order; time beyond the last piece uses ``H = 0``.
    """

    ideal_unitary: np.ndarray
    duration: float
    control: list = field(default_factory=list)
    initial_states: list | None = None

    def __post_init__(self):
        U = np.asarray(self.ideal_unitary, dtype=complex)
        d = U.shape[0]
        if U.shape != (d, d) or d & (d - 1) or d < 2:
            raise ValueError("ideal unitary must be 2^N x 2^N")
        if np.max(np.abs(U.conj().T @ U - np.eye(d))) > 1e-10:
            raise ValueError("ideal unitary is not unitary")
        if not self.duration > 0:
            raise ValueError("gate duration must be > 0")
        pieces = []
        for tau, H in self.control:
            H = np.asarray(H, dtype=complex)
            if H.shape != (d, d):
                raise ValueError("control Hamiltonian has the wrong dimension")
            if np.max(np.abs(H - H.conj().T)) > 1e-12 * max(1.0, np.max(np.abs(H))):
                raise ValueError("control Hamiltonian is not Hermitian")
            if not tau > 0:
                raise ValueError("control piece durations must be > 0")
            pieces.append((float(tau), H))
        object.__setattr__(self, "ideal_unitary", U)
        object.__setattr__(self, "control", pieces)
        if self.initial_states is not None:
            object.__setattr__(self, "initial_states",
                               [np.asarray(r, dtype=complex) for r in self.initial_states])

    @property
    def n_qubits(self) -> int:
        return int(round(math.log2(self.ideal_unitary.shape[0])))

    def states(self) -> list[np.ndarray]:
        if self.initial_states is None:
            return default_initial_states(self.n_qubits)
        if not self.initial_states:
            raise ValueError("initial state set is empty")
        return self.initial_states

    def hamiltonian(self, t: float) -> np.ndarray | None:
        start = 0.0
        for tau, H in self.control:
            if t < start + tau:
                return H
            start += tau
        return None

    @classmethod
    def idle(cls, n_qubits: int, duration: float, **kw) -> "GateSpec":
        return cls(np.eye(2**n_qubits), duration, **kw)

    @classmethod
    def from_hamiltonian(cls, H, duration: float, **kw) -> "GateSpec":
        """Gate whose ideal unitary is ``exp(-i H t / hbar)`` for a constant ``H``."""
        H = np.asarray(H, dtype=complex)
        U = expm(-1j * H * duration / HBAR)
        return cls(U, duration, control=[(duration, H)], **kw)


# ------------------------------------------------------------- evolution

@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray        # (K, d, d)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def check_density_matrix(rho, herm_tol=1e-10, trace_tol=1e-9, eig_tol=1e-8) -> None:
    rho = np.asarray(rho)
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    if herm > herm_tol:
        raise InvariantError(f"density matrix not Hermitian (deviation {herm:.3e})")
    tr = complex(np.trace(rho))
    if abs(tr - 1.0) > trace_tol:
        raise InvariantError(f"density matrix trace {tr.real:.12g} differs from 1")
    ev = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if ev[0] < -eig_tol:
        raise InvariantError(f"density matrix has eigenvalue {ev[0]:.3e}")


def evolve(rho0, gate: GateSpec, generator: LindbladGenerator, dt: float,
           store_every: int = 1) -> Trajectory:
    """Fixed-step RK4 for ``drho/dt = -(i/hbar)[H_u(t), rho] + L[rho](t)``.

    The step is shrunk so that ``duration / dt`` is an integer. Invariants
    are checked after every step; states are kept every ``store_every``
    steps plus the final one.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    nsteps = max(1, int(math.ceil(gate.duration / dt - 1e-9)))
    if nsteps > 10_000_000:
        raise ValueError("duration / dt exceeds 1e7 steps")
    h = gate.duration / nsteps
    rho = np.array(rho0, dtype=complex)
    if rho.shape != (generator.dim, generator.dim):
        raise ValueError("state dimension does not match the generator")
    check_density_matrix(rho)

    def f(r, t):
        out = generator(r, t)
        H = gate.hamiltonian(t)
        if H is not None:
            out = out - 1j / HBAR * (H @ r - r @ H)
        return out

    times, states = [0.0], [rho.copy()]
    t = 0.0
    for k in range(nsteps):
        k1 = f(rho, t)
        k2 = f(rho + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(rho + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(rho + h * k3, t + h)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = (k + 1) * h
        try:
            check_density_matrix(rho)
        except InvariantError as exc:
            raise InvariantError(f"step {k + 1} (t = {t:.4e} s): {exc}; reduce dt") from None
        if (k + 1) % store_every == 0 or k + 1 == nsteps:
            times.append(t)
            states.append(rho.copy())
    return Trajectory(np.array(times), np.array(states))


def _is_pure(rho, tol=1e-9) -> bool:
    return abs(np.trace(rho @ rho).real - 1.0) <= tol


def gate_fidelity(gate: GateSpec, generator: LindbladGenerator, dt: float) -> float:
    """State-averaged overlap ``mean Tr[rho(t_f) U rho0 U^dagger]``."""
    U = gate.ideal_unitary
    total = 0.0
    states = gate.states()
    for rho0 in states:
        check_density_matrix(rho0)
        if not _is_pure(rho0):
            raise ValueError("fidelity averaging needs pure initial states")
        final = evolve(rho0, gate, generator, dt, store_every=10**9).final
        ideal = U @ rho0 @ U.conj().T
        total += float(np.trace(final @ ideal).real)
    return total / len(states)


def infidelity(gate: GateSpec, generator: LindbladGenerator, dt: float) -> float:
    """``F(no noise) - F(noise)``."""
    clean = gate_fidelity(gate, zero_generator(generator.n_qubits), dt)
    return clean - gate_fidelity(gate, generator, dt)
