import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcem.emcore import (C0, CONST, HBAR, KB, MU0, Convention, BathSpec, GreenSample, Provenance,
                         convert, free_space_Gm_im, grad_scalar_green, incident_E_magnetic_dipole,
                         incident_H_magnetic_dipole, is_psd, mean_photon_number, scalar_green,
                         to_physics)


def test_constants_consistent():
    assert abs(CONST.c**2 * CONST.mu0 * CONST.eps0 - 1) < 1e-9
    for v in (CONST.c, CONST.mu0, CONST.eps0, CONST.hbar, CONST.kb, CONST.muB):
        assert v > 0


def test_convention_round_trip():
    z = np.array([1 + 2j, -3.5j])
    once = convert(z, Convention.ENGINEERING, Convention.PHYSICS)
    np.testing.assert_array_equal(once, np.conj(z))
    np.testing.assert_array_equal(convert(once, "physics", "engineering"), z)
    np.testing.assert_array_equal(convert(z, "physics", "physics"), z)
    np.testing.assert_array_equal(to_physics(z), np.conj(z))


def test_scalar_green_examples():
    lam = 0.37
    assert scalar_green([0, 0, 0], [lam, 0, 0], 2 * np.pi / lam) == pytest.approx(1 / (4 * np.pi * lam), rel=1e-12)
    assert scalar_green([0, 0, 0], [0, 2, 0], 0.0) == pytest.approx(1 / (8 * np.pi), rel=1e-15)
    assert scalar_green([0, 0, 0], [0, 0, 1], np.pi) == pytest.approx(-1 / (4 * np.pi), rel=1e-12)
    eng = scalar_green([0, 0, 0], [0.3, 0, 0], 2.0)
    phy = scalar_green([0, 0, 0], [0.3, 0, 0], 2.0, Convention.PHYSICS)
    assert phy == np.conj(eng)


def test_coincident_points_rejected():
    with pytest.raises(ValueError):
        scalar_green([1, 2, 3], [1, 2, 3], 1.0)
    with pytest.raises(ValueError):
        grad_scalar_green([1, 2, 3], [1, 2, 3], 1.0)
    with pytest.raises(ValueError):
        incident_E_magnetic_dipole([0, 0, 0], [0, 0, 0], [0, 0, 1], 1e9)


def test_grad_static():
    g = grad_scalar_green([1, 0, 0], [0, 0, 0], 0.0)
    np.testing.assert_allclose(g, [-1 / (4 * np.pi), 0, 0], rtol=1e-14, atol=1e-18)


@settings(max_examples=60, deadline=None)
@given(st.floats(-8, 0), st.floats(0, 1e3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_grad_matches_finite_difference(logR, k0, direction):
    R = 10.0**logR
    d = np.array(direction) / np.linalg.norm(direction)
    rp = R * np.array([0.1, -0.2, 0.3])
    r = rp + R * d
    g = grad_scalar_green(r, rp, k0)
    h = 1e-6 * R
    fd = np.array([(scalar_green(r + h * e, rp, k0) - scalar_green(r - h * e, rp, k0)) / (2 * h)
                   for e in np.eye(3)])
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)
    # gradient with respect to the source point is the negative
    gp = np.array([(scalar_green(r, rp + h * e, k0) - scalar_green(r, rp - h * e, k0)) / (2 * h)
                   for e in np.eye(3)])
    assert np.linalg.norm(g + gp) <= 1e-6 * np.linalg.norm(g)


def test_dipole_E_axial_and_linear():
    r_src = np.zeros(3)
    r = np.array([0.0, 0.0, 2e-7])
    w = 2 * np.pi * 2.87e9
    E = incident_E_magnetic_dipole(r, r_src, [0, 0, 1.0], w)
    assert np.allclose(E, 0)
    m = np.array([1.0, 0.5, -0.3])
    r = np.array([1e-7, -2e-7, 3e-7])
    E1 = incident_E_magnetic_dipole(r, r_src, m, w)
    assert abs(E1 @ (r - r_src)) <= 1e-12 * np.linalg.norm(E1) * np.linalg.norm(r)
    np.testing.assert_allclose(incident_E_magnetic_dipole(r, r_src, 2 * m, w), 2 * E1, rtol=1e-15)


def test_dipole_curl_gives_H():
    # curl E = -j w mu0 H for the incident dipole fields
    w = 2 * np.pi * 1e9
    r_src = np.array([0.0, 0.0, 0.0])
    m = np.array([0.3, -0.2, 1.0])
    r = np.array([0.4, 0.1, 0.7])
    h = 1e-6

    def E(p):
        return incident_E_magnetic_dipole(p, r_src, m, w)

    J = np.zeros((3, 3), complex)
    for k, e in enumerate(np.eye(3)):
        J[:, k] = (E(r + h * e) - E(r - h * e)) / (2 * h)
    curl = np.array([J[2, 1] - J[1, 2], J[0, 2] - J[2, 0], J[1, 0] - J[0, 1]])
    H = incident_H_magnetic_dipole(r, r_src, m, w)
    np.testing.assert_allclose(curl, -1j * w * MU0 * H, rtol=1e-4)


def test_free_space_Gm():
    w = 2 * np.pi * 2.87e9
    G = free_space_Gm_im(w)
    assert G[0, 0] == pytest.approx(w / (6 * np.pi * C0), rel=1e-15)
    assert G[0, 0] == pytest.approx(3.19, abs=0.005)
    np.testing.assert_array_equal(G, G[0, 0] * np.eye(3))
    np.testing.assert_array_equal(free_space_Gm_im(0.0), np.zeros((3, 3)))
    np.testing.assert_array_equal(free_space_Gm_im(2 * w), 2 * G)
    assert is_psd(G)


def test_mean_photon_number():
    T = 0.3
    w = KB * T / HBAR
    assert mean_photon_number(w, T) == pytest.approx(1 / (math.e - 1), rel=1e-12)
    assert mean_photon_number(1e10, 0.0) == 0.0
    w18 = 2 * np.pi * 18e9
    x = HBAR * w18 / KB
    assert x == pytest.approx(0.864, abs=1e-3)
    assert mean_photon_number(w18, 1.0) == pytest.approx(1 / math.expm1(x), rel=1e-12)
    with pytest.raises(ValueError):
        mean_photon_number(0.0, 1.0)
    with pytest.raises(ValueError):
        mean_photon_number(-1.0, 1.0)


def test_mean_photon_number_monotone():
    ws = np.geomspace(1e6, 1e12, 40)
    n = mean_photon_number(ws, 1.0)
    assert np.all(np.diff(n) < 0)
    Ts = np.linspace(0.05, 10, 40)
    n = np.array([mean_photon_number(1e10, T) for T in Ts])
    assert np.all(np.diff(n) > 0)


def test_bath_spec():
    assert BathSpec(0.0).nbar(1e9) == 0.0
    with pytest.raises(ValueError):
        BathSpec(-1.0)
    with pytest.raises(ValueError):
        BathSpec(1.0, 0.0)


def test_green_sample_checks():
    s = GreenSample([0, 0, 1e-8], [0, 0, 1e-8], 1e9, np.diag([1j, 1j, 2j]), Provenance.LAYERED)
    assert s.coincident
    np.testing.assert_array_equal(s.physics, s.tensor)
    with pytest.raises(ValueError):
        GreenSample([0, 0, 1], [0, 0, 1], 1e9, np.full((3, 3), np.nan), Provenance.VIE)
