import numpy as np
import pytest

from qcem.emcore import EPS0, MU0, to_physics
from qcem.mesh import Material, TetMesh, generate_ball, generate_box, merge_meshes
from qcem.vie import (AssemblyOptions, ObservationError, ResidualError, SingularSystemError,
                      VIEError, VIESystem, assemble, assemble_rhs, build_swg_space, dipole_rhs,
                      factorize, gram_matrix, load_matrix_dump, scattered_E, scattered_H, solve)
from qcem import vie

nm = 1e-9
W = 2 * np.pi * 2.87e9
SILVER = Material("Ag", 5e7)
GLASS = Material("glass", 0.0, 4.0)
VAC = Material("vac", 0.0, 1.0)

UNIT_TET = TetMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]], [0], {0: GLASS})


def two_tets(material=GLASS):
    nodes = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]]
    return TetMesh(nodes, [[0, 1, 2, 3], [1, 2, 3, 4]], [0, 0], {0: material})


@pytest.fixture(scope="module")
def small_ball():
    return generate_ball(50 * nm, 3, SILVER)


@pytest.fixture(scope="module")
def glass_cube():
    return generate_box((40 * nm, 40 * nm, 40 * nm), 20 * nm, GLASS, origin=(-20 * nm,) * 3)


def test_counts():
    s = build_swg_space(UNIT_TET, W)
    assert (s.n_unknowns, s.n_interior, s.n_boundary) == (4, 0, 4)
    m = two_tets()
    assert m.volumes()[1] > 0
    s = build_swg_space(m, W)
    assert (s.n_unknowns, s.n_interior) == (7, 1)


def test_ordering_deterministic(glass_cube):
    a = build_swg_space(glass_cube, W)
    b = build_swg_space(glass_cube, W)
    np.testing.assert_array_equal(a.face_nodes, b.face_nodes)
    keys = [tuple(f) for f in a.face_nodes.tolist()]
    assert keys == sorted(keys)


def test_empty_mesh_rejected():
    empty = TetMesh(np.zeros((0, 3)), np.zeros((0, 4), int), np.zeros(0, int), {})
    with pytest.raises(ValueError):
        build_swg_space(empty, W)


def test_normal_continuity_and_divergence(glass_cube):
    s = build_swg_space(glass_cube, W)
    nodes = glass_cube.nodes
    rng = np.random.default_rng(1)
    interior = np.flatnonzero(s.face_owners[:, 1] >= 0)
    for f in rng.choice(interior, 10, replace=False):
        tri = nodes[s.face_nodes[f]]
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n /= np.linalg.norm(n)
        bary = rng.dirichlet(np.ones(3), 5)
        pts = bary @ tri
        vals = []
        for tet in s.face_owners[f]:
            k = list(s.tet_unknowns[tet]).index(f)
            vals.append(s.basis_on_tet(tet, pts)[k] @ n)
        np.testing.assert_allclose(vals[0], vals[1], rtol=1e-12, atol=1e-12)
        assert np.allclose(np.abs(vals[0]), 1.0)
        # divergence: +-A/V, checked by a finite difference of the linear field
        for tet, sgn in zip(s.face_owners[f], (1, -1)):
            k = list(s.tet_unknowns[tet]).index(f)
            c = glass_cube.centroids()[tet]
            h = 1e-10
            div = sum((s.basis_on_tet(tet, (c + h * e)[None])[k, 0, i]
                       - s.basis_on_tet(tet, (c - h * e)[None])[k, 0, i]) / (2 * h)
                      for i, e in enumerate(np.eye(3)))
            assert div == pytest.approx(sgn * s.face_areas[f] / s.volumes[tet], rel=1e-6)


def test_vacuum_matrix_is_gram(glass_cube):
    s = build_swg_space(glass_cube.with_materials({0: VAC}), W)
    A = assemble(s).matrix
    G = gram_matrix(s)
    np.testing.assert_array_equal(A, G)
    # scaled by 1/eps0
    np.testing.assert_allclose(G * EPS0, gram_matrix(build_swg_space(glass_cube.with_materials({0: VAC}), W)) * EPS0)
    # closed form for a single tet self term: int f.f = coef^2 int |r - v|^2
    s1 = build_swg_space(UNIT_TET.with_materials({0: VAC}), W)
    g = gram_matrix(s1)
    assert np.allclose(g, g.T)


def test_complex_symmetric(small_ball):
    A = assemble(build_swg_space(small_ball, W)).matrix
    assert np.max(np.abs(A - A.T)) <= 1e-8 * np.max(np.abs(A))


def test_far_pair_quadrature_converged():
    a = generate_box((10 * nm,) * 3, 10 * nm, GLASS)
    b = a.translated((200 * nm, 0, 0))
    m = merge_meshes([a, b])
    s = build_swg_space(m, 2 * np.pi * 1e9)
    # the default degree 2 moves these entries by ~3e-4; its effect on
    # observables is bounded by test_quadrature_order_self_convergence
    A2 = assemble(s, AssemblyOptions(far_degree=4, far_tri_degree=4)).matrix
    A4 = assemble(s, AssemblyOptions(far_degree=8, far_tri_degree=8)).matrix
    half = s.n_unknowns // 2
    # unknowns of the two cubes are separated by face ordering on node ids
    cross_rows = np.flatnonzero(s.face_nodes[:, 0] < a.n_nodes)
    cross_cols = np.flatnonzero(s.face_nodes[:, 0] >= a.n_nodes)
    assert len(cross_rows) == half
    X2 = A2[np.ix_(cross_rows, cross_cols)]
    X4 = A4[np.ix_(cross_rows, cross_cols)]
    assert np.max(np.abs(X2 - X4)) <= 1e-6 * np.max(np.abs(X4))


def test_factorize_recovers_vector(glass_cube):
    sysm = factorize(assemble(build_swg_space(glass_cube, W)))
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=sysm.n) + 1j * rng.normal(size=sysm.n)
    b = sysm.matrix @ x0
    sol = solve(sysm, b)
    assert np.linalg.norm(sol.coeffs - x0) <= 1e-10 * np.linalg.norm(x0)
    b = rng.normal(size=sysm.n) + 0j
    sol = solve(sysm, b)
    assert np.linalg.norm(sysm.matrix @ sol.coeffs - b) <= 1e-10 * np.linalg.norm(b)


def test_multi_rhs_matches_single(small_ball):
    sysm = factorize(assemble(build_swg_space(small_ball, W)))
    rhs = [dipole_rhs(sysm.space, [0, 0, 120 * nm], e) for e in np.eye(3)]
    together = solve(sysm, np.column_stack(rhs))
    for k in range(3):
        alone = solve(sysm, rhs[k])
        np.testing.assert_array_equal(together[k].coeffs, alone.coeffs)


def test_singular_matrix_rejected():
    s = build_swg_space(UNIT_TET, W)
    bad = VIESystem(s, np.zeros((4, 4), complex), AssemblyOptions())
    with pytest.raises((SingularSystemError, ValueError)):
        factorize(bad)
    with pytest.raises(VIEError):
        solve(VIESystem(s, np.eye(4, dtype=complex), AssemblyOptions()), np.ones(4))


def test_residual_error_raised():
    s = build_swg_space(UNIT_TET, W)
    sysm = factorize(VIESystem(s, np.eye(4, dtype=complex), AssemblyOptions()))
    sysm.matrix = sysm.matrix * 2.0      # stale factorization: residual is 50%
    with pytest.raises(ResidualError) as info:
        solve(sysm, np.ones(4), refine_steps=0)
    assert info.value.residual == pytest.approx(1.0)


def test_memory_guard(glass_cube):
    s = build_swg_space(glass_cube, W)
    with pytest.raises(MemoryError):
        assemble(s, AssemblyOptions(memory_cap=1000))


def test_rhs_zero_linear_and_closed_form():
    s = build_swg_space(UNIT_TET, W)
    assert np.all(assemble_rhs(s, lambda p: np.zeros(p.shape)) == 0)
    E = lambda p: np.broadcast_to(np.array([0.3, -1.0, 2.0j]), p.shape)  # noqa: E731
    v = assemble_rhs(s, E)
    np.testing.assert_allclose(assemble_rhs(s, lambda p: 2.5 * E(p)), 2.5 * v, rtol=1e-14)
    # uniform z field: int f_k . z = coef_k * V * (c_z - v_kz)
    vz = assemble_rhs(s, lambda p: np.broadcast_to(np.array([0.0, 0.0, 1.0]), p.shape))
    V = UNIT_TET.volumes()[0]
    c = UNIT_TET.centroids()[0]
    verts = UNIT_TET.nodes[UNIT_TET.tets[0]]
    expect = np.zeros(4)
    for k in range(4):
        expect[s.tet_unknowns[0, k]] = s.tet_coef[0, k] * V * (c[2] - verts[k, 2])
    np.testing.assert_allclose(vz.real, expect, rtol=1e-10, atol=1e-14)


def test_dipole_inside_rejected(small_ball):
    s = build_swg_space(small_ball, W)
    with pytest.raises(ObservationError):
        dipole_rhs(s, [0, 0, 0], [0, 0, 1])


def test_observation_checks(small_ball):
    s = build_swg_space(small_ball, W)
    sol = solve(factorize(assemble(s)), dipole_rhs(s, [0, 0, 150 * nm], [0, 0, 1]))
    with pytest.raises(ObservationError):
        scattered_H(sol, [0, 0, 0])
    with pytest.raises(ObservationError):
        scattered_H(sol, [0, 0, 50.1 * nm])


def test_vacuum_scatters_nothing(glass_cube):
    s = build_swg_space(glass_cube.with_materials({0: VAC}), W)
    sysm = factorize(assemble(s))
    b = dipole_rhs(s, [0, 0, 100 * nm], [1, 0, 0])
    sol = solve(sysm, b)
    assert np.all(scattered_H(sol, [0, 0, 100 * nm]) == 0)
    assert np.all(scattered_E(sol, [0, 0, 100 * nm]) == 0)
    # D is eps0 times the projection of the incident field
    G = gram_matrix(s) * EPS0
    np.testing.assert_allclose(G @ sol.coeffs / EPS0, b, rtol=1e-9, atol=1e-12 * np.abs(b).max())


@pytest.fixture(scope="module")
def ball_solution(small_ball):
    s = build_swg_space(small_ball, W)
    sysm = factorize(assemble(s))
    r0 = np.array([0, 0, 150 * nm])
    sols = solve(sysm, np.column_stack([dipole_rhs(s, r0, e) for e in np.eye(3)]))
    return s, sols, r0


def test_linearity_and_current(ball_solution):
    s, sols, r0 = ball_solution
    obs = np.array([30 * nm, 10 * nm, 140 * nm])
    sol = sols[0]
    scaled = vie.VIESolution(s, 3.0 * sol.coeffs)
    np.testing.assert_allclose(scattered_H(scaled, obs), 3 * scattered_H(sol, obs), rtol=1e-13)
    pts = s.mesh.centroids()[[0]]
    np.testing.assert_allclose(sol.J(0, pts), 1j * W * s.kappa[0] * sol.D(0, pts))


def test_bound_charge_neutral(ball_solution):
    s, sols, _ = ball_solution
    sol = sols[2]
    vol = np.sum(sol.volume_charge() * s.volumes)
    surf = np.sum(sol.surface_charge() * s.face_areas)
    # interior fluxes dominate the rounding, so scale by all of them
    scale = np.sum(np.abs(sol.coeffs) * s.face_areas)
    assert abs(vol + surf) <= 1e-10 * scale


def test_H_is_curl_of_E(ball_solution):
    s, sols, _ = ball_solution
    sol = sols[0]
    r = np.array([40 * nm, -30 * nm, 160 * nm])
    h = 1e-3 * nm

    def E(p):
        return scattered_E(sol, p)

    J = np.zeros((3, 3), complex)
    for k, e in enumerate(np.eye(3)):
        J[:, k] = (E(r + h * e) - E(r - h * e)) / (2 * h)
    curl = np.array([J[2, 1] - J[1, 2], J[0, 2] - J[2, 0], J[1, 0] - J[0, 1]])
    H = scattered_H(sol, r)
    assert np.linalg.norm(curl / (-1j * W * MU0) - H) <= 1e-3 * np.linalg.norm(H)


def test_absorbed_power_nonnegative(ball_solution):
    s, sols, r0 = ball_solution
    k0 = s.k0
    G = np.column_stack([scattered_H(sol, r0) for sol in sols]) / k0**2
    Gp = to_physics(G)
    rng = np.random.default_rng(3)
    for _ in range(5):
        m = rng.normal(size=3) + 1j * rng.normal(size=3)
        val = np.vdot(m, Gp @ m)
        assert val.imag >= -1e-8 * abs(val)


def test_quadrature_order_self_convergence(small_ball):
    r0 = np.array([0, 0, 120 * nm])
    out = []
    for opts in (AssemblyOptions(), AssemblyOptions(far_degree=3, far_tri_degree=3, near_degree=6,
                                                    near_tri_degree=6, loose_degree=3, inner_degree=3)):
        s = build_swg_space(small_ball, W)
        sol = solve(factorize(assemble(s, opts)), dipole_rhs(s, r0, [0, 0, 1]))
        out.append(scattered_H(sol, r0)[2])
    assert abs(out[1].imag - out[0].imag) <= 5e-3 * abs(out[1].imag)


def _far_field_slopes(mesh, omega, radii):
    s = build_swg_space(mesh, omega)
    sysm = factorize(assemble(s))
    b = assemble_rhs(s, lambda p: np.broadcast_to(np.array([0, 0, 1.0 + 0j]), p.shape))
    sol = solve(sysm, b)
    mags = [np.linalg.norm(scattered_E(sol, [R, 0, 0])) for R in radii]
    return np.polyfit(np.log(radii), np.log(mags), 1)[0]


def test_scattered_E_decay(glass_cube):
    # induced electric dipole: 1/R^3 in the quasi-static zone, 1/R in the radiation zone
    w = 2 * np.pi * 18e9
    near = _far_field_slopes(glass_cube, w, np.geomspace(400 * nm, 2000 * nm, 6))
    assert near == pytest.approx(-3.0, abs=0.05)
    far = _far_field_slopes(glass_cube, w, np.geomspace(2.0, 20.0, 6))
    assert far == pytest.approx(-1.0, abs=0.05)


def test_dump_layout(tmp_path):
    s = build_swg_space(UNIT_TET, W)
    A = np.arange(16).reshape(4, 4) * (1 + 2j)
    sysm = VIESystem(s, A, AssemblyOptions())
    p = tmp_path / "m.bin"
    sysm.dump(p)
    raw = p.read_bytes()
    assert raw[:7] == b"QEMVIE1"
    assert int.from_bytes(raw[7:15], "little") == 4
    np.testing.assert_array_equal(load_matrix_dump(p), A)
