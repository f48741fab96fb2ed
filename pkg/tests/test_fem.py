import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st
from scipy import integrate

from oracles import dense_solve
from jumpfem import fem
from jumpfem.fem import (
    CoefficientValidityError, Lattice, SolverError, assemble, assemble_load, backward_euler,
    evaluate_on_grid, fe_error, grid_norm, mass_matrix, nodal_interpolate, solve_linear,
)
from jumpfem.jump_model import (
    CoefficientPair, JumpHeights, compose_coefficients, partition_from_points,
    rectilinear_partition,
)
from jumpfem.mesh import adapted_mesh, uniform_mesh


def const_coeff(dim, a=1.0, b=None):
    def diffusion(points, ids):
        return np.full(len(points), float(a))
    adv = None
    if b is not None:
        adv = lambda points, ids: np.tile(np.asarray(b, dtype=float), (len(points), 1))
    return CoefficientPair(dim, diffusion, adv)


def smooth_coeff(dim, fn):
    return CoefficientPair(dim, lambda points, ids: fn(points))


def rayleigh_min(mat):
    d = mat.toarray()
    return np.linalg.eigvalsh(0.5 * (d + d.T)).min()


# -- assembly -------------------------------------------------------------------

def test_1d_stencils():
    h = 0.125
    m = uniform_mesh(1, h)
    s = assemble(m, const_coeff(1))
    A, M = s.A.toarray(), s.M.toarray()
    i = 3
    assert A[i, i - 1:i + 2] == pytest.approx([-1 / h, 2 / h, -1 / h], rel=1e-13)
    assert M[i, i - 1:i + 2] == pytest.approx([h / 6, 2 * h / 3, h / 6], rel=1e-13)


def test_stiffness_linear_in_constant():
    m = adapted_mesh(rectilinear_partition([0.3], [0.6]), 0.1)
    a1 = assemble(m, const_coeff(2, 1.0), advection=False).A
    a3 = assemble(m, const_coeff(2, 3.7), advection=False).A
    assert abs(a3 - 3.7 * a1).max() < 1e-12


def test_2d_laplacian_annihilates_constants():
    for h in (0.5, 0.125):
        m = uniform_mesh(2, h)
        meas, grads = fem._element_geometry(m)
        local = meas[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)
        full = fem._scatter(m, local)
        assert abs(full - full.T).max() < 1e-14
        assert np.max(np.abs(full @ np.ones(m.n_vertices))) < 1e-12
        A = assemble(m, const_coeff(2), advection=False).A
        assert abs(A - A.T).max() < 1e-14
    # the single free vertex at h = 0.5 carries the 4 / -1 Laplacian stencil
    A = assemble(uniform_mesh(2, 0.5), const_coeff(2)).A.toarray()
    assert A.shape == (1, 1) and A[0, 0] == pytest.approx(4.0)


def test_mass_and_diffusion_spd():
    rng = np.random.default_rng(0)
    for dim in (1, 2):
        part = partition_from_points([0.4]) if dim == 1 else rectilinear_partition([0.4], [0.3, 0.7])
        m = adapted_mesh(part, 0.1)
        coeff = compose_coefficients(None, part, JumpHeights(rng.uniform(0, 10, part.tau)))
        s = assemble(m, coeff, advection=False)
        assert abs(s.M - s.M.T).max() < 1e-15
        assert rayleigh_min(s.M) > 0
        assert abs(s.A - s.A.T).max() < 1e-12
        assert rayleigh_min(s.A) > 0


def test_mass_matrix_total():
    m = adapted_mesh(rectilinear_partition([0.4], [0.3, 0.7]), 0.1)
    assert mass_matrix(m).sum() == pytest.approx(1.0, abs=1e-13)


def test_advection_matches_hand_computation():
    # 1D, b constant: (b u', v) with midpoint phi = 1/2 gives b/2 * (-1, 0, 1)
    m = uniform_mesh(1, 0.25)
    s = assemble(m, const_coeff(1, 1.0, [3.0]))
    d = assemble(m, const_coeff(1), advection=False)
    adv = (s.A - d.A).toarray()
    assert adv[1, :3] == pytest.approx([-1.5, 0.0, 1.5])


def test_nonpositive_diffusion_rejected():
    with pytest.raises(CoefficientValidityError):
        assemble(uniform_mesh(1, 0.25), const_coeff(1, -1.0))


def test_load_vector():
    h = 0.125
    m = uniform_mesh(1, h)
    assert np.all(assemble_load(m, lambda x, t: np.zeros(len(x))) == 0)
    F = assemble_load(m, lambda x, t: np.ones(len(x)))
    assert F == pytest.approx(np.full(7, h))
    # sum of interior hat integrals equals 1 - (mass of the two boundary hats)
    m2 = uniform_mesh(2, 0.1)
    F2 = assemble_load(m2, lambda x, t: np.ones(len(x)))
    hats = mass_matrix(m2) @ np.ones(m2.n_vertices)
    assert F2.sum() == pytest.approx(1.0 - hats[m2.boundary_vertices].sum(), rel=1e-12)


def test_nodal_interpolation():
    m = uniform_mesh(1, 0.25)
    c = nodal_interpolate(m, lambda x: np.sin(np.pi * x) / 10)
    assert c[1] == pytest.approx(0.1)
    # P1 functions are reproduced
    coarse = uniform_mesh(1, 0.125)
    vals = np.random.default_rng(1).random(coarse.n_vertices)
    vals[[0, -1]] = 0
    fine = adapted_mesh(partition_from_points([0.5]), 0.125)
    g = lambda x: coarse.interpolate(vals, x)
    assert np.allclose(np.concatenate([[0], nodal_interpolate(fine, g), [0]]), vals, atol=1e-14)


def test_interpolation_error_order():
    u = lambda x: np.sin(np.pi * x) * np.exp(x)
    du = lambda x: (np.pi * np.cos(np.pi * x) + np.sin(np.pi * x)) * np.exp(x)
    errs, hs = [], [1 / 8, 1 / 16, 1 / 32, 1 / 64]
    for h in hs:
        m = uniform_mesh(1, h)
        errs.append(fe_error(m, u(m.xs), u, du)[1])
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 1.0) < 0.05


def test_quadrature_order_against_exact_stiffness():
    # one-point quadrature of smooth a converges to the exact stiffness (order >= 1)
    a = lambda x: 2.0 + np.sin(3.0 * x) + x**2
    part = partition_from_points([0.37])
    errs, hs = [], [1 / 6, 1 / 12, 1 / 24, 1 / 48]
    for h in hs:
        m = adapted_mesh(part, h)
        A = assemble(m, smooth_coeff(1, a), advection=False).A.toarray()
        # oracle: quad of a over each cell times the constant P1 gradients
        x = m.xs
        free = m.free_vertices
        E = np.zeros((m.n_vertices, m.n_vertices))
        for k in range(m.n_cells):
            w = x[k + 1] - x[k]
            val = integrate.quad(a, x[k], x[k + 1])[0] / w**2
            E[np.ix_([k, k + 1], [k, k + 1])] += val * np.array([[1, -1], [-1, 1]])
        E = E[np.ix_(free, free)]
        errs.append(np.linalg.norm(A - E) / np.linalg.norm(E))
        assert m.n_cells <= 100
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 1.0 - 0.15


# -- linear solves ----------------------------------------------------------------

def test_solve_identity_and_hand_case():
    rhs = np.array([1.0, -2.0, 3.0])
    assert solve_linear(sp.identity(3, format="csr"), rhs) == pytest.approx(rhs)
    # 3-DOF Poisson on h = 1/4 with f = 1: A = 4 tridiag(-1, 2, -1), F = 1/4
    A = sp.diags([[-4.0] * 2, [8.0] * 3, [-4.0] * 2], [-1, 0, 1], format="csr")
    x = solve_linear(A, np.full(3, 0.25))
    assert np.max(np.abs(x - [3 / 32, 1 / 8, 3 / 32])) < 1e-12


@pytest.mark.parametrize("method", ["direct", "bicgstab"])
def test_nonsymmetric_against_dense_oracle(method):
    m = uniform_mesh(1, 1 / 40)
    s = assemble(m, const_coeff(1, 0.5, [7.0]))
    mat = (s.M + 0.1 * s.A).tocsr()
    rhs = np.random.default_rng(2).standard_normal(s.n_dof)
    assert s.n_dof <= 50
    x = solve_linear(mat, rhs, method)
    assert np.max(np.abs(x - dense_solve(mat, rhs))) < 1e-10
    assert np.linalg.norm(mat @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_singular_system_raises():
    with pytest.raises(SolverError):
        solve_linear(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])), np.array([1.0, 0.0]))


def test_solver_is_deterministic():
    m = uniform_mesh(2, 0.05)
    s = assemble(m, const_coeff(2, 1.0, [2.0, -1.0]))
    rhs = np.random.default_rng(3).random(s.n_dof)
    assert np.array_equal(solve_linear(s.A, rhs), solve_linear(s.A, rhs))


# -- time stepping --------------------------------------------------------------

def test_scalar_recursion():
    lam, dt = 3.0, 0.1
    mesh = uniform_mesh(1, 0.5)  # one free vertex
    s = fem.SparseSystem(mesh, sp.csr_matrix([[1.0]]), sp.csr_matrix([[lam]]), mesh.free_vertices)
    traj = backward_euler(s, np.zeros(1), np.ones(1), dt, 1.0)
    want = (1 + dt * lam) ** -np.arange(11)
    assert np.allclose(traj.states[:, 0], want, rtol=1e-13)
    assert traj.n_steps == 10


def test_time_grid_rounding():
    assert fem.time_grid(1.0, 0.3) == (3, 1 / 3)
    assert fem.time_grid(1.0, 2.0) == (1, 1.0)


@pytest.mark.parametrize("dt", [1.0, 0.1, 0.01])
def test_energy_decay(dt):
    rng = np.random.default_rng(4)
    part = rectilinear_partition([0.35], [0.55])
    m = adapted_mesh(part, 0.05)
    coeff = compose_coefficients(None, part, JumpHeights(rng.uniform(0, 10, 4)))
    s = assemble(m, coeff, advection=False)
    traj = backward_euler(s, np.zeros(s.n_dof), rng.standard_normal(s.n_dof), dt, 1.0)
    energy = np.array([c @ (s.M @ c) for c in traj.states])
    assert np.all(np.diff(energy) <= 1e-14 * energy[0])


def test_initial_state_and_time_interpolation():
    m = uniform_mesh(1, 1 / 16)
    s = assemble(m, const_coeff(1))
    c0 = nodal_interpolate(m, lambda x: np.sin(np.pi * x))
    traj = backward_euler(s, assemble_load(m, lambda x, t: np.ones(len(x))), c0, 0.1, 1.0)
    assert np.array_equal(traj.states[0], c0)
    lat = Lattice(1, 17)  # contains every mesh vertex
    for i in (0, 3, 10):
        assert np.allclose(evaluate_on_grid(traj, traj.times[i], lat)[1:-1], traj.states[i], atol=1e-15)
    mid = evaluate_on_grid(traj, 0.25, lat)
    avg = 0.5 * (evaluate_on_grid(traj, 0.2, lat) + evaluate_on_grid(traj, 0.3, lat))
    assert np.allclose(mid, avg, atol=1e-15)


def test_keep_last_matches_keep_all():
    m = uniform_mesh(1, 1 / 16)
    s = assemble(m, const_coeff(1, 1.0, [1.0]))
    F = assemble_load(m, lambda x, t: np.ones(len(x)))
    c0 = np.ones(s.n_dof)
    a = backward_euler(s, F, c0, 0.05, 1.0, keep="all")
    b = backward_euler(s, F, c0, 0.05, 1.0, keep="last")
    assert np.array_equal(a.states[-1], b.states[-1])


def _heat_1d(h, dt, T):
    # u = sin(pi x) e^-t, a = 1, b = 0, f = (pi^2 - 1) sin(pi x) e^-t
    m = uniform_mesh(1, h)
    s = assemble(m, const_coeff(1), advection=False)
    f = lambda x, t: (np.pi**2 - 1) * np.sin(np.pi * x) * np.exp(-t)
    c0 = nodal_interpolate(m, lambda x: np.sin(np.pi * x))
    traj = backward_euler(s, lambda t: assemble_load(m, f, t), c0, dt, T, keep="last")
    u = lambda x: np.sin(np.pi * x) * np.exp(-T)
    du = lambda x: np.pi * np.cos(np.pi * x) * np.exp(-T)
    return fe_error(m, traj.nodal_values(T), u, du)


def spatial_orders():
    hs = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    errs = np.array([_heat_1d(h, 1e-4, 0.5) for h in hs])
    l2 = np.polyfit(np.log(hs), np.log(errs[:, 0]), 1)[0]
    h1 = np.polyfit(np.log(hs), np.log(errs[:, 1]), 1)[0]
    return l2, h1


def temporal_order():
    dts = np.array([0.2, 0.1, 0.05, 0.025])
    errs = np.array([_heat_1d(1 / 2000, dt, 1.0)[1] for dt in dts])
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


def test_manufactured_spatial_orders():
    l2, h1 = spatial_orders()
    assert abs(h1 - 1.0) <= 0.15
    assert abs(l2 - 2.0) <= 0.15


def test_manufactured_temporal_order():
    assert abs(temporal_order() - 1.0) <= 0.15


def test_manufactured_2d_spatial_order():
    T = 0.1
    u = lambda p, t: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]) * np.exp(-t)
    errs, hs = [], [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    for h in hs:
        m = uniform_mesh(2, h)
        s = assemble(m, const_coeff(2), advection=False)
        f = lambda p, t: (2 * np.pi**2 - 1) * u(p, t)
        traj = backward_euler(s, lambda t: assemble_load(m, f, t), nodal_interpolate(m, lambda p: u(p, 0)),
                              1e-3, T, keep="last")
        grad = lambda p: np.pi * np.exp(-T) * np.stack([
            np.cos(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]),
            np.sin(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1])], axis=1)
        errs.append(fe_error(m, traj.nodal_values(T), lambda p: u(p, T), grad)[1])
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 1.0) <= 0.15


# -- lattice norms ----------------------------------------------------------------

def test_grid_norm_examples():
    lat = Lattice(1, 2**10 + 1)
    x = lat.axis
    assert grid_norm(np.ones_like(x), lat, "L2") == pytest.approx(1.0, abs=1e-14)
    assert grid_norm(np.sin(np.pi * x), lat, "H1_semi") == pytest.approx(math.pi / math.sqrt(2), abs=1e-3)
    for kind in ("L2", "H1_semi", "H1"):
        assert grid_norm(np.zeros_like(x), lat, kind) == 0
    assert grid_norm(np.zeros((3, len(x))), lat, "parabolic_sup", times=[0, 0.5, 1]) == 0


def test_grid_norm_2d():
    lat = Lattice(2, 129)
    p = lat.points
    v = np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
    assert grid_norm(v, lat, "L2") == pytest.approx(0.5, abs=1e-4)
    assert grid_norm(v, lat, "H1_semi") == pytest.approx(math.pi / math.sqrt(2), abs=2e-3)


def test_parabolic_norm_of_separable_function():
    # w = sin(pi x) e^-t: sup_t (|w|^2 + int_0^t |w'|^2) is attained at t = T
    lat = Lattice(1, 1025)
    times = np.linspace(0, 1, 401)
    snaps = np.array([np.sin(np.pi * lat.axis) * math.exp(-t) for t in times])
    want = math.sqrt(0.5 * math.exp(-2) + math.pi**2 / 2 * (1 - math.exp(-2)) / 2)
    assert grid_norm(snaps, lat, "parabolic_sup", times=times) == pytest.approx(want, rel=1e-4)


def test_lattice_norm_matches_exact_p1_norm():
    rng = np.random.default_rng(5)
    part = partition_from_points([0.3, 0.55])
    m = adapted_mesh(part, 1 / 16)
    vals = rng.standard_normal(m.n_vertices)
    vals[[0, -1]] = 0
    exact_semi = math.sqrt(np.sum(np.diff(vals) ** 2 / np.diff(m.xs)))
    prev = None
    for n in (257, 1025, 4097):
        lat = Lattice(1, n)
        err = abs(grid_norm(m.interpolate(vals, lat.axis), lat, "H1_semi") - exact_semi)
        assert err < 20.0 / n * exact_semi
        if prev is not None:
            assert err < prev
        prev = err


def test_lattice_exact_on_nested_grid():
    m = uniform_mesh(1, 1 / 16)
    vals = np.random.default_rng(6).standard_normal(17)
    lat = Lattice(1, 1025)
    semi = math.sqrt(np.sum(np.diff(vals) ** 2) * 16)
    assert grid_norm(m.interpolate(vals, lat.axis), lat, "H1_semi") == pytest.approx(semi, rel=1e-12)


def test_evaluate_outside_domain():
    m = uniform_mesh(1, 0.25)
    with pytest.raises(Exception):
        m.interpolate(np.zeros(5), [1.5])


@given(st.floats(0.01, 10.0), st.floats(0.01, 1.0))
def test_stiffness_scaling_property(c, dt):
    m = uniform_mesh(1, 0.125)
    s1 = assemble(m, const_coeff(1, 1.0), advection=False)
    sc = assemble(m, const_coeff(1, c), advection=False)
    assert abs(sc.A - c * s1.A).max() <= 1e-12 * c * abs(s1.A).max()
    # backward Euler contracts in the M-norm for any step
    c0 = np.ones(s1.n_dof)
    traj = backward_euler(sc, np.zeros(s1.n_dof), c0, dt, 1.0)
    e = np.array([v @ (sc.M @ v) for v in traj.states])
    assert np.all(np.diff(e) <= 1e-14 * e[0])
