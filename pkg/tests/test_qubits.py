import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sici

from _oracles import flat_dephasing
from qcem.emcore import C0, HBAR, MU0, MU_B, BathSpec, free_space_Gm_im, is_psd
from qcem.greens import Scene
from qcem.layered import LayeredStack
from qcem.mesh import Material
from qcem.qubits import (DephasingRates, DephasingSpectrum, GateSpec, InvariantError, QubitSpec,
                         RateError, RateSet, RegimeWarning, basis_state, build_lindblad,
                         check_density_matrix, default_initial_states, dephasing_rates, evolve,
                         gate_fidelity, infidelity, relaxation_rates, sample_spectrum,
                         sine_weighted_integral, spectrum_grid, t1_from_rate, zero_generator)

nm = 1e-9
W = 2 * np.pi * 2.87e9
W18 = 2 * np.pi * 18e9
FILM = Scene(stack=LayeredStack(125 * nm, Material("Al", 1.6e8)))


def free_space(a, b, w):
    return 1j * free_space_Gm_im(w)


def z1():
    return np.zeros((1, 1))


def random_density(rng, d):
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = A @ A.conj().T
    return rho / np.trace(rho)


# ------------------------------------------------------------ qubit specs

def test_moment_construction():
    for axis in (np.eye(3)[0], np.eye(3)[2], np.array([1.0, 2.0, -2.0]) / 3):
        q = QubitSpec([0, 0, 1e-8], W, axis)
        assert abs(q.m_eg @ q.axis) == 0 or abs(q.m_eg @ q.axis) < 1e-30
        assert np.linalg.norm(q.m_eg) == pytest.approx(MU_B, rel=1e-14)
        np.testing.assert_array_equal(q.m_ge, np.conj(q.m_eg))
        np.testing.assert_allclose(q.m_par, MU_B * axis, rtol=1e-15)
        # (e1 - i e2) with e1 x e2 = n
        e1, e2 = math.sqrt(2) * q.m_eg.real / MU_B, -math.sqrt(2) * q.m_eg.imag / MU_B
        np.testing.assert_allclose(np.cross(e1, e2), axis, atol=1e-14)


def test_qubit_validation():
    with pytest.raises(ValueError):
        QubitSpec([0, 0, 0], W, [0, 0, 2.0])
    with pytest.raises(ValueError):
        QubitSpec([0, 0, 0], 0.0)
    with pytest.raises(ValueError):
        QubitSpec([0, 0, 0], W, transverse_moment=-1.0)


# ------------------------------------------------------------ relaxation

def test_free_space_rate():
    q = QubitSpec([0, 0, 1e-6], W)
    g = relaxation_rates([q], free_space, BathSpec()).gamma[0, 0]
    k0 = W / C0
    expect = 2 * MU0 * k0**2 / HBAR * MU_B**2 * W / (6 * np.pi * C0)
    assert g.real == pytest.approx(expect, rel=1e-12)
    assert g.real == pytest.approx(2.3666e-14, rel=1e-4)
    assert g.imag == 0


def test_zero_moments_give_zero():
    q = QubitSpec([0, 0, 1e-6], W, transverse_moment=0.0)
    assert np.all(relaxation_rates([q, q], free_space, BathSpec()).gamma == 0)


def test_pair_formula_reduces_to_diagonal():
    a = QubitSpec([0, 0, 30 * nm], W18)
    b = QubitSpec([0, 0, 30 * nm], W18)
    G = relaxation_rates([a, b], FILM, BathSpec()).gamma
    assert G[0, 1] == pytest.approx(G[0, 0], rel=1e-14)
    assert G[1, 1] == pytest.approx(G[0, 0], rel=1e-14)


def test_rates_hermitian_psd_and_bounded():
    qs = [QubitSpec([x * nm, 0, 40 * nm], W18, ax)
          for x, ax in ((0, [0, 0, 1.0]), (25, [1.0, 0, 0]), (60, [0, 0.6, 0.8]))]
    G = relaxation_rates(qs, FILM, BathSpec()).gamma
    np.testing.assert_array_equal(G, G.conj().T)
    assert np.all(G.diagonal().real >= 0)
    assert is_psd(G)
    for i in range(3):
        for j in range(3):
            assert abs(G[i, j]) <= math.sqrt(G[i, i].real * G[j, j].real) + 1e-8 * abs(G).max()


def test_correlation_ratio_tends_to_one():
    rs = []
    for d in (1.0, 10.0, 40.0):
        qs = [QubitSpec([-d / 2 * nm, 0, 40 * nm], W18), QubitSpec([d / 2 * nm, 0, 40 * nm], W18)]
        G = relaxation_rates(qs, FILM, BathSpec()).gamma
        rs.append((G[0, 1] / G[0, 0]).real)
    assert abs(rs[0] - 1) < 0.02
    assert rs[0] >= rs[1] >= rs[2] >= -1


def test_regime_warning():
    qs = [QubitSpec([0, 0, 1e-6], W), QubitSpec([0, 0, 2e-6], 2 * W)]
    with pytest.warns(RegimeWarning, match="0.333"):
        relaxation_rates(qs, lambda a, b, w: 1j * free_space_Gm_im(w), BathSpec())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        relaxation_rates([qs[0], QubitSpec([0, 0, 2e-6], 1.01 * W)], free_space, BathSpec())


def test_nbar_at_mean_frequency():
    qs = [QubitSpec([0, 0, 1e-6], W), QubitSpec([0, 0, 2e-6], 1.1 * W)]
    r = relaxation_rates(qs, free_space, BathSpec(0.1))
    assert r.omega_plus[0, 1] == pytest.approx(1.05 * W)
    assert r.nbar[0, 1] == pytest.approx(BathSpec(0.1).nbar(1.05 * W), rel=1e-12)


def test_t1():
    assert t1_from_rate(1.0, 0.0) == pytest.approx(1 / 3)
    assert t1_from_rate(1.0, 0.5) == pytest.approx(1 / 6)
    assert t1_from_rate(2.0, 0.3) == pytest.approx(t1_from_rate(1.0, 0.3) / 2)
    for bad in (0.0, -1.0):
        with pytest.raises(RateError):
            t1_from_rate(bad, 0.0)


# ------------------------------------------------------------- dephasing

WC = 2 * np.pi * 1e7


def flat_spectrum(S0=1.0):
    grid = spectrum_grid(WC)
    return grid, np.full_like(grid, S0)


@pytest.mark.parametrize("x", [1.0, 10.0, 100.0])
def test_flat_spectrum_matches_sine_integral(x):
    grid, s = flat_spectrum()
    val = sine_weighted_integral(grid, s, x / WC, WC)
    assert val == pytest.approx(sici(x)[0], rel=1e-3)
    # prefactored rate against the independent oracle
    rate = 4 * MU0 / (HBAR * math.pi) * val
    assert rate == pytest.approx(flat_dephasing(1.0, WC, x / WC) / HBAR, rel=1e-3)


def test_flat_spectrum_saturates():
    grid, s = flat_spectrum()
    val = sine_weighted_integral(grid, s, 1e4 / WC, WC)
    assert val == pytest.approx(math.pi / 2, rel=1e-3)


def test_dephasing_zero_at_t0():
    grid, s = flat_spectrum()
    assert sine_weighted_integral(grid, s, 0.0, WC) == 0.0
    q = QubitSpec([0, 0, 1e-6], W)
    spec = DephasingSpectrum(grid, np.ones((len(grid), 1, 1, 3, 3)))
    np.testing.assert_array_equal(dephasing_rates([q], spec, BathSpec(dephasing_cutoff=WC), 0.0),
                                  np.zeros((1, 1)))


def test_support_below_half_cutoff_is_invariant():
    grid = spectrum_grid(2 * WC, 8, 5)
    s = np.where(grid < WC / 2, (grid / WC) ** 0.5, 0.0)
    t = 37.0 / WC
    a = sine_weighted_integral(grid, s, t, WC)
    b = sine_weighted_integral(grid, s, t, 2 * WC)
    assert a > 0
    assert abs(a - b) <= 1e-10 * abs(a)


def test_power_law_spectrum_exact():
    # s = w: the integral is (1 - cos(wc t)) / t exactly
    grid = spectrum_grid(WC)
    t = 3.3 / WC
    val = sine_weighted_integral(grid, grid.copy(), t, WC)
    assert val == pytest.approx((1 - math.cos(WC * t)) / t, rel=1e-9)


def test_spectrum_checks():
    q = QubitSpec([0, 0, 1e-6], W)
    short = np.logspace(3, 6, 13)
    with pytest.raises(ValueError, match="below the cutoff"):
        DephasingRates([q], DephasingSpectrum(short, np.ones((13, 1, 1, 3, 3))), BathSpec())
    sparse = np.logspace(3, math.log10(BathSpec().dephasing_cutoff), 5)
    with pytest.raises(ValueError, match="sparse"):
        DephasingRates([q], DephasingSpectrum(sparse, np.ones((5, 1, 1, 3, 3))), BathSpec())
    with pytest.raises(ValueError):
        DephasingSpectrum([1.0, 0.5], np.ones((2, 1, 1, 3, 3)))


def test_dephasing_from_layered_film():
    bath = BathSpec(0.1, WC)
    qs = [QubitSpec([0, 0, 40 * nm], W18), QubitSpec([20 * nm, 0, 40 * nm], W18)]
    spec = sample_spectrum(qs, FILM, spectrum_grid(WC, 5, 2))
    rates = DephasingRates(qs, spec, bath)
    g = rates(1e-6)
    assert g[0, 0] > 0 and g[0, 0] == pytest.approx(g[1, 1], rel=1e-10)
    assert 0 < g[0, 1] <= g[0, 0]
    np.testing.assert_array_equal(g, g.T)


# -------------------------------------------------------------- Lindblad

def test_zero_generator():
    rng = np.random.default_rng(0)
    rho = random_density(rng, 4)
    assert np.all(zero_generator(2)(rho) == 0)


def test_decay_rate_read_off():
    gen = build_lindblad(RateSet(np.array([[2.5]]), z1(), z1()))
    d = gen(basis_state(1, 1))
    assert d[1, 1].real == pytest.approx(-2.5)
    assert d[0, 0].real == pytest.approx(2.5)


def test_non_hermitian_rejected():
    G = np.array([[1.0, 0.5j], [0.5j, 1.0]])
    with pytest.raises(RateError):
        build_lindblad(RateSet(G, np.zeros((2, 2)), np.zeros((2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.floats(0, 3))
def test_generator_trace_and_hermiticity(seed, n, nbar):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    G = A @ A.conj().T
    B = rng.normal(size=(n, n))
    deph = B @ B.T
    rates = RateSet(G, np.full((n, n), nbar), np.ones((n, n)), lambda t: deph)
    gen = build_lindblad(rates)
    rho = random_density(rng, 2**n)
    out = gen(rho, 0.3)
    assert abs(np.trace(out)) <= 1e-12 * max(1.0, np.abs(out).max())
    np.testing.assert_allclose(out, out.conj().T, atol=1e-12 * np.abs(out).max())


# ------------------------------------------------------------- evolution

def test_no_noise_no_motion():
    rng = np.random.default_rng(1)
    rho = random_density(rng, 2)
    tr = evolve(rho, GateSpec.idle(1, 1.0), zero_generator(1), 0.1)
    for s in tr.states:
        np.testing.assert_array_equal(s, rho)


@pytest.mark.parametrize("gt", [0.1, 1.0, 3.0])
def test_pure_dephasing_closed_form(gt):
    gam = 0.7
    gen = build_lindblad(RateSet(z1(), z1(), z1(), lambda t: np.array([[gam]])))
    v = np.array([1, 1]) / np.sqrt(2)
    rho = np.outer(v, v).astype(complex)
    tr = evolve(rho, GateSpec.idle(1, gt / gam), gen, 1e-3)
    assert tr.final[0, 1].real == pytest.approx(0.5 * math.exp(-2 * gt), rel=1e-6)


@pytest.mark.parametrize("gt", [0.1, 1.0, 3.0])
def test_relaxation_closed_form(gt):
    gen = build_lindblad(RateSet(np.array([[1.0]]), z1(), z1()))
    tr = evolve(basis_state(1, 1), GateSpec.idle(1, gt), gen, 1e-3)
    assert tr.final[1, 1].real == pytest.approx(math.exp(-gt), rel=1e-6)


def test_thermal_steady_state():
    nbar = 0.4
    gen = build_lindblad(RateSet(np.array([[1.0]]), np.array([[nbar]]), z1()))
    tr = evolve(basis_state(1, 1), GateSpec.idle(1, 30.0), gen, 1e-2)
    assert tr.final[1, 1].real == pytest.approx(nbar / (2 * nbar + 1), rel=1e-6)


def test_long_evolution_keeps_invariants():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    rates = RateSet(A @ A.conj().T, np.full((2, 2), 0.2), np.ones((2, 2)),
                    lambda t: np.array([[0.3, 0.1], [0.1, 0.2]]) * min(t, 1.0))
    tr = evolve(random_density(rng, 4), GateSpec.idle(2, 1.0), build_lindblad(rates), 1e-3)
    assert len(tr.states) == 1001
    for s in tr.states:
        check_density_matrix(s)


def test_invariant_violation_reported():
    gen = build_lindblad(RateSet(np.array([[1e3]]), z1(), z1()))
    with pytest.raises(InvariantError, match="reduce dt"):
        evolve(basis_state(1, 1), GateSpec.idle(1, 1.0), gen, 0.1)


def test_gate_spec_checks():
    with pytest.raises(ValueError):
        GateSpec(np.array([[1, 1], [0, 1]]), 1.0)
    with pytest.raises(ValueError):
        GateSpec(np.eye(2), 0.0)
    with pytest.raises(ValueError):
        GateSpec(np.eye(2), 1.0, control=[(1.0, np.array([[0, 1], [0, 0]]))])
    assert len(default_initial_states(1)) == 4
    assert len(default_initial_states(2)) == 4


# -------------------------------------------------------------- fidelity

def test_exact_control_gives_unit_fidelity():
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    tf = 1e-8
    H = HBAR * math.pi / (2 * tf) * X
    gate = GateSpec.from_hamiltonian(H, tf)
    assert gate_fidelity(gate, zero_generator(1), tf / 10000) == pytest.approx(1.0, abs=1e-9)


def test_idle_relaxation_fidelity():
    gen = build_lindblad(RateSet(np.array([[1.0]]), z1(), z1()))
    gate = GateSpec.idle(1, 1.0, initial_states=[basis_state(0, 1), basis_state(1, 1)])
    assert gate_fidelity(gate, gen, 1e-3) == pytest.approx((1 + math.exp(-1)) / 2, rel=1e-6)


def test_dephasing_blind_basis():
    gen = build_lindblad(RateSet(z1(), z1(), z1(), lambda t: np.array([[0.9]])))
    basis = GateSpec.idle(1, 1.0, initial_states=[basis_state(0, 1), basis_state(1, 1)])
    assert gate_fidelity(basis, gen, 1e-2) == pytest.approx(1.0, abs=1e-12)
    assert infidelity(GateSpec.idle(1, 1.0), gen, 1e-2) > 0.1


def test_mixed_initial_state_rejected():
    gate = GateSpec.idle(1, 1.0, initial_states=[0.5 * np.eye(2)])
    with pytest.raises(ValueError, match="pure"):
        gate_fidelity(gate, zero_generator(1), 0.1)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 1.0))
def test_fidelity_bounds(g, gam, nbar):
    gen = build_lindblad(RateSet(np.array([[g]]), np.array([[nbar]]), z1(), lambda t: np.array([[gam]])))
    F = gate_fidelity(GateSpec.idle(1, 0.5), gen, 5e-3)
    assert 0.0 <= F <= 1.0 + 1e-9
