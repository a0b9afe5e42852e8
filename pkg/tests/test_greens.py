import numpy as np
import pytest

from _oracles import sphere_multipole
from qcem import vie
from qcem.emcore import Provenance, is_psd
from qcem.greens import Scene, green_scan, magnetic_green_tensor
from qcem.layered import LayeredStack, reflected_Gm_layered
from qcem.mesh import Material, generate_ball
from qcem.vie import ObservationError

nm = 1e-9
W = 2 * np.pi * 2.87e9
SILVER = Material("Ag", 5e7)
AL = Material("Al", 1.6e8)

# quasi-static multipole series for a 50 nm silver sphere (frozen diagonal)
RI = np.array([0.0, 0.0, 250.0]) * nm
RJ = np.array([30.0, -20.0, 200.0]) * nm
MULTIPOLE_DIAG = np.array([-518131.59852104 + 2.00508937e+09j,
                           -538847.33448913 + 2.08789853e+09j,
                           -2094015.0175398 + 8.02229787e+09j])


@pytest.fixture(scope="module")
def ball():
    return generate_ball(50 * nm, 3, SILVER)


@pytest.fixture(scope="module")
def ball_scene(ball):
    return Scene(mesh=ball)


def test_scene_needs_one_backend(ball):
    with pytest.raises(ValueError):
        Scene()
    with pytest.raises(ValueError):
        Scene(mesh=ball, stack=LayeredStack(1e-7, AL))
    assert Scene(mesh=ball).backend == "vie"
    assert Scene(stack=LayeredStack(1e-7, AL)).backend == "layered"


def test_vacuum_scene_is_zero(ball):
    vac = Scene(mesh=ball.with_materials({0: Material("vac", 0.0)}))
    s = magnetic_green_tensor(vac, RI, RJ, W)
    assert np.all(s.tensor == 0)
    assert s.provenance == Provenance.VIE


def test_bad_inputs(ball_scene):
    with pytest.raises(ValueError):
        green_scan(ball_scene, [(RI, RJ)], [0.0])
    with pytest.raises(ValueError):
        green_scan(ball_scene, [(RI[:2], RJ)], [W])
    with pytest.raises(ObservationError):
        magnetic_green_tensor(ball_scene, [0, 0, 0], RJ, W)


def test_scan_matches_single_pair_calls(ball_scene):
    pairs = [(RI, RJ), (RJ, RI), (RI, RI), (RJ + [0, 0, 20 * nm], RJ)]
    scan = green_scan(ball_scene, pairs, [W])
    for (a, b), s in zip(pairs, scan):
        one = magnetic_green_tensor(ball_scene, a, b, W)
        assert np.max(np.abs(s.tensor - one.tensor)) <= 1e-12 * np.max(np.abs(one.tensor))


def test_scan_order_invariant(ball_scene):
    pairs = [(RI, RJ), (RJ, RI), (RI, RI)]
    a = green_scan(ball_scene, pairs, [W])
    b = green_scan(ball_scene, pairs[::-1], [W])
    for x, y in zip(a, b[::-1]):
        assert np.max(np.abs(x.tensor - y.tensor)) <= 1e-12 * np.max(np.abs(x.tensor))


def test_one_factorization_per_frequency(ball_scene):
    rng = np.random.default_rng(3)
    pts = [np.array([0, 0, 120 * nm]) + rng.uniform(-40, 40, 3) * nm for _ in range(5)]
    pairs = [(pts[i], pts[(i + 1) % 5]) for i in range(5)] + [(p, p) for p in pts]
    vie.counters.reset()
    out = green_scan(ball_scene, pairs, [W, 2 * W])
    assert len(out) == 20
    assert vie.counters.factorizations == 2 and vie.counters.assemblies == 2
    # frequency-major ordering
    assert all(s.omega == W for s in out[:10]) and all(s.omega == 2 * W for s in out[10:])


def test_reciprocity(ball_scene):
    G = magnetic_green_tensor(ball_scene, RI, RJ, W).tensor
    H = magnetic_green_tensor(ball_scene, RJ, RI, W).tensor
    assert np.max(np.abs(G - H.T)) <= 1e-2 * np.max(np.abs(G))


def test_coincident_psd(ball_scene):
    for r in (RI, RJ):
        G = magnetic_green_tensor(ball_scene, r, r, W).tensor
        assert is_psd(G.imag)


def test_layered_passthrough():
    stack = LayeredStack(125 * nm, AL)
    w = 2 * np.pi * 18e9
    a, b = [0, 0, 30 * nm], [10 * nm, 0, 30 * nm]
    s = magnetic_green_tensor(Scene(stack=stack), a, b, w)
    np.testing.assert_array_equal(s.tensor, reflected_Gm_layered(a, b, w, stack).tensor)
    assert s.provenance == Provenance.LAYERED


def test_converges_to_multipole_series():
    errs = []
    for n in (3, 4, 5):
        G = magnetic_green_tensor(Scene(mesh=generate_ball(50 * nm, n, SILVER)), RI, RJ, W).tensor
        errs.append(np.max(np.abs(np.diag(G) / MULTIPOLE_DIAG - 1)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.15
    # roughly second order in the ball resolution
    assert errs[2] / errs[0] < (4 / 5) ** 2


def test_multipole_oracle_reproduces_frozen_values():
    G = sphere_multipole(RI, RJ, W, 50 * nm, 5e7)
    np.testing.assert_allclose(np.diag(G), MULTIPOLE_DIAG, rtol=1e-6)
